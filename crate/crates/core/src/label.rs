//! Attenuation → liver-fat calibration and steatosis grading.
//!
//! The linear HU→fat map and the grade thresholds are calibration data, not
//! algorithm constants: they are carried in [`FatCalib`], configurable
//! end to end, and recorded in run output.

use crate::error::{Error, Result};
use crate::volume::Roi;
use serde::{Deserialize, Serialize};

pub const GRADE_COUNT: usize = 4;

/// Calibration for fat scoring: `fat% = clamp(c0 + c1·HU, 0, 100)` and the
/// three grade boundaries in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatCalib {
    /// Percent offset.
    pub c0: f64,
    /// Percent per Hounsfield unit (negative: fattier livers attenuate less).
    pub c1: f64,
    /// Grade boundaries t1 < t2 < t3, percent.
    pub thresholds: [f64; 3],
}

impl Default for FatCalib {
    fn default() -> Self {
        FatCalib {
            c0: 38.2,
            c1: -0.58,
            thresholds: [5.0, 15.0, 25.0],
        }
    }
}

impl FatCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0.is_finite() && self.c1.is_finite()) {
            return Err(Error::InvalidConfig("fat calibration must be finite".into()));
        }
        let [t1, t2, t3] = self.thresholds;
        if !(t1 < t2 && t2 < t3 && t1 > 0.0 && t3 < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "grade thresholds must be strictly increasing within (0,100), got {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }
}

/// Linear fat score clamped to [0, 100] percent.
pub fn hu_to_fat_pct(mean_hu: f64, calib: &FatCalib) -> f64 {
    (calib.c0 + calib.c1 * mean_hu).clamp(0.0, 100.0)
}

/// Bin a fat percentage into grade 0–3. A value equal to a boundary belongs
/// to the higher grade.
pub fn fat_to_grade(fat_pct: f64, calib: &FatCalib) -> u8 {
    let [t1, t2, t3] = calib.thresholds;
    if fat_pct < t1 {
        0
    } else if fat_pct < t2 {
        1
    } else if fat_pct < t3 {
        2
    } else {
        3
    }
}

/// Ground-truth liver label for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiverLabel {
    pub fat_pct: f64,
    pub grade: u8,
    pub mean_hu: f64,
    pub rois: Vec<Roi>,
}

impl LiverLabel {
    /// Build a label from a measured mean attenuation; fat and grade stay
    /// consistent with the calibration by construction.
    pub fn from_mean_hu(mean_hu: f64, calib: &FatCalib, rois: Vec<Roi>) -> Self {
        let fat_pct = hu_to_fat_pct(mean_hu, calib);
        LiverLabel {
            fat_pct,
            grade: fat_to_grade(fat_pct, calib),
            mean_hu,
            rois,
        }
    }
}
