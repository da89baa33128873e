//! Liver-fat percentage regression from body-shape depth maps.
//!
//! The crate covers the full desk-scale workflow:
//!
//! - a reverse-mode differentiable tensor engine ([`tape`], [`tensor`],
//!   [`optim`]) with exactly the operators the networks need;
//! - volumetric preprocessing ([`volume`], [`label`]): body masking, depth
//!   profiles, frontal/lateral depth-map projection, attenuation-based
//!   fat scoring and grade binning;
//! - a deterministic synthetic phantom cohort generator ([`phantom`]) that
//!   couples body shape to liver fat, so the system trains end to end
//!   without clinical data;
//! - the dual-input regression networks ([`model`]): plain backbone,
//!   attention with a regression component, and the full multi-channel
//!   attention variant with a joint regression+classification loss;
//! - training and five-fold cross-validated evaluation ([`train`], [`cv`],
//!   [`metrics`]), classical references ([`baseline`]), and gradient
//!   activation heatmaps ([`gradcam`]);
//! - binary file formats and the dataset manifest ([`io`]).

// pub mod baseline;
// pub mod cv;
pub mod error;
// pub mod gradcam;
pub mod io;
pub mod label;
// pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod tape;
pub mod tensor;
// pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
