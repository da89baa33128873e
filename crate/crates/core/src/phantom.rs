//! Deterministic synthetic body phantoms with a known shape–fat coupling.
//!
//! Each subject is a stack of superellipse cross-sections (exponent 2.5)
//! over soft-tissue attenuation, with an ellipsoidal liver region whose
//! attenuation encodes the ground-truth fat percentage. Adiposity `v`
//! couples shape to fat twice over: the waist half-axes scale as
//! `1 + 0.6·v` (a smooth gain peaked at the waist) and the generative fat
//! percentage is `40·v + ε` with `ε ~ N(0, σ²)`, clamped to [0, 45].
//!
//! The liver attenuation is chosen so the measurement pipeline
//! (`mean_liver_hu` over the placed regions, then the phantom calibration
//! `fat = 65 − HU`) recovers the generative fat to within half a
//! percentage point, closing the loop between generator and pipeline.
//!
//! Cohort generation samples anatomy nuisance (overall size, aspect, torso
//! taper, height, position) per subject from streams derived from
//! `(seed, subject)`, so generation order and parallelism never change the
//! output.

use crate::error::{Error, Result};
use crate::io::{write_depth_maps, write_manifest, write_volume, ManifestRow};
use crate::label::{fat_to_grade, FatCalib, LiverLabel};
use crate::volume::{mean_liver_hu, project_depth_maps, Roi, Volume, DEFAULT_BODY_THRESHOLD_HU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Superellipse exponent for torso cross-sections.
pub const TORSO_EXPONENT: f64 = 2.5;

/// Waist gain at full adiposity: half-axes scale by `1 + WAIST_GAIN·v`.
pub const WAIST_GAIN: f64 = 0.6;

/// Generative fat percentage per unit adiposity.
pub const FAT_PER_ADIPOSITY: f64 = 40.0;

/// Upper clamp for the generative fat percentage.
pub const FAT_MAX: f64 = 45.0;

/// Liver attenuation intercept: liver HU = `LIVER_HU_BASE − fat%`.
pub const LIVER_HU_BASE: f64 = 65.0;

const TISSUE_HU: f64 = 40.0;
const AIR_HU: i16 = -1000;
const TISSUE_TEXTURE_HU: f64 = 4.0;
const LIVER_TEXTURE_HU: f64 = 3.0;
const WAIST_REL_Z: f64 = 0.45;
const WAIST_BUMP_WIDTH: f64 = 0.18;

/// Liver placement relative to the torso frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiverPlacement {
    /// In-plane center as fractions of the slice half-axes (x toward the
    /// subject's right, y toward the back).
    pub rel_center: (f64, f64),
    /// In-plane radii as fractions of the slice half-axes.
    pub rel_radii: (f64, f64),
    /// Liver center height as a fraction of the body slice range.
    pub rel_z: f64,
    /// Half-extent along z, in slices.
    pub z_half_slices: usize,
    /// Number of measurement regions to place.
    pub roi_count: usize,
}

impl Default for LiverPlacement {
    fn default() -> Self {
        LiverPlacement {
            rel_center: (0.30, -0.12),
            rel_radii: (0.30, 0.26),
            rel_z: 0.55,
            z_half_slices: 6,
            roi_count: 10,
        }
    }
}

/// Full description of one phantom subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f32; 3],
    /// Per-slice base half-axes (a, b) in millimetres; (0, 0) marks slices
    /// without body.
    pub profile: Vec<(f64, f64)>,
    /// Adiposity factor in [0, 1].
    pub adiposity: f64,
    /// Label jitter σ in percentage points.
    pub label_noise_pct: f64,
    /// In-plane body center offset from the volume center, millimetres.
    pub center_offset_mm: (f64, f64),
    pub liver: LiverPlacement,
    /// Grade thresholds used for the label.
    pub thresholds: [f64; 3],
    pub seed: u64,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.profile.len() != self.nz {
            return Err(Error::InvalidArgument(format!(
                "profile length {} != nz {}",
                self.profile.len(),
                self.nz
            )));
        }
        if !(0.0..=1.0).contains(&self.adiposity) {
            return Err(Error::InvalidArgument(format!(
                "adiposity must be in [0,1], got {}",
                self.adiposity
            )));
        }
        if self.label_noise_pct < 0.0 {
            return Err(Error::InvalidArgument("label noise must be >= 0".into()));
        }
        if self.profile.iter().any(|&(a, b)| (a < 0.0) || (b < 0.0) || (a > 0.0) != (b > 0.0)) {
            return Err(Error::InvalidArgument(
                "profile half-axes must be both positive or both zero".into(),
            ));
        }
        if !self.profile.iter().any(|&(a, _)| a > 0.0) {
            return Err(Error::InvalidArgument("profile defines no body".into()));
        }
        Ok(())
    }

    /// The calibration under which the pipeline recovers this phantom's
    /// generative fat: `fat = 65 − HU`.
    pub fn calib(&self) -> FatCalib {
        FatCalib {
            c0: LIVER_HU_BASE,
            c1: -1.0,
            thresholds: self.thresholds,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Generative (pre-measurement) fat percentage. Replays exactly the
    /// noise draw `generate_phantom` makes.
    pub fn generative_fat_pct(&self) -> f64 {
        let mut rng = self.rng();
        let z: f64 = StandardNormal.sample(&mut rng);
        (FAT_PER_ADIPOSITY * self.adiposity + self.label_noise_pct * z).clamp(0.0, FAT_MAX)
    }

    /// Occupied slice range [first, last].
    fn body_slices(&self) -> (usize, usize) {
        let first = self.profile.iter().position(|&(a, _)| a > 0.0).unwrap_or(0);
        let last = self
            .profile
            .iter()
            .rposition(|&(a, _)| a > 0.0)
            .unwrap_or(self.profile.len().saturating_sub(1));
        (first, last)
    }

    /// Waist gain per slice: `1 + 0.6·v·bump(z)` with the bump normalized to
    /// peak exactly 1 on the occupied slices.
    fn waist_gains(&self) -> Vec<f64> {
        let (z0, z1) = self.body_slices();
        let span = (z1 - z0).max(1) as f64;
        let bump = |z: usize| -> f64 {
            let u = (z - z0) as f64 / span;
            let d = (u - WAIST_REL_Z) / WAIST_BUMP_WIDTH;
            (-0.5 * d * d).exp()
        };
        let peak = (z0..=z1).map(bump).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        (0..self.nz)
            .map(|z| {
                if z < z0 || z > z1 || self.profile[z].0 == 0.0 {
                    1.0
                } else {
                    1.0 + WAIST_GAIN * self.adiposity * (bump(z) / peak)
                }
            })
            .collect()
    }
}

/// A generated subject: the volume, its measured label, and the generative
/// ground truth the label is supposed to recover.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub volume: Volume,
    pub label: LiverLabel,
    pub generative_fat_pct: f64,
}

/// Generate one phantom and measure its label through the pipeline.
pub fn generate_phantom(params: &PhantomParams) -> Result<(Volume, LiverLabel)> {
    let s = generate_phantom_full(params)?;
    Ok((s.volume, s.label))
}

pub fn generate_phantom_full(params: &PhantomParams) -> Result<PhantomSubject> {
    params.validate()?;
    let mut rng = params.rng();
    let z_noise: f64 = StandardNormal.sample(&mut rng);
    let fat = (FAT_PER_ADIPOSITY * params.adiposity + params.label_noise_pct * z_noise)
        .clamp(0.0, FAT_MAX);

    let (nx, ny, nz) = (params.nx, params.ny, params.nz);
    let (sx, sy, sz) = (
        params.spacing[0] as f64,
        params.spacing[1] as f64,
        params.spacing[2] as f64,
    );
    let _ = sz;
    let cx_mm = nx as f64 * sx / 2.0 + params.center_offset_mm.0;
    let cy_mm = ny as f64 * sy / 2.0 + params.center_offset_mm.1;
    let gains = params.waist_gains();

    // Liver frame.
    let (z0, z1) = params.body_slices();
    let liver_zc = z0 + ((z1 - z0) as f64 * params.liver.rel_z).round() as usize;
    let liver_zr = params.liver.z_half_slices;
    let liver_hu = LIVER_HU_BASE - fat;

    let mut voxels = vec![AIR_HU; nx * ny * nz];
    let mut pow_x = vec![0.0f64; nx];
    let mut pow_y = vec![0.0f64; ny];
    for z in 0..nz {
        let (a0, b0) = params.profile[z];
        if a0 == 0.0 {
            continue;
        }
        let a = a0 * gains[z];
        let b = b0 * gains[z];
        for (x, p) in pow_x.iter_mut().enumerate() {
            let dx = ((x as f64 + 0.5) * sx - cx_mm).abs() / a;
            *p = dx.powf(TORSO_EXPONENT);
        }
        for (y, p) in pow_y.iter_mut().enumerate() {
            let dy = ((y as f64 + 0.5) * sy - cy_mm).abs() / b;
            *p = dy.powf(TORSO_EXPONENT);
        }
        // Liver cross-section at this slice, if any.
        let liver = if z + liver_zr >= liver_zc && z <= liver_zc + liver_zr {
            let dz = (z as f64 - liver_zc as f64) / (liver_zr as f64 + 0.5);
            let shrink = (1.0 - dz * dz).max(0.0).sqrt();
            let lcx = cx_mm + params.liver.rel_center.0 * a;
            let lcy = cy_mm + params.liver.rel_center.1 * b;
            let lrx = params.liver.rel_radii.0 * a * shrink;
            let lry = params.liver.rel_radii.1 * b * shrink;
            (lrx > 0.0).then_some((lcx, lcy, lrx, lry))
        } else {
            None
        };
        for y in 0..ny {
            if pow_y[y] > 1.0 {
                continue;
            }
            let rest = 1.0 - pow_y[y];
            let y_mm = (y as f64 + 0.5) * sy;
            for x in 0..nx {
                if pow_x[x] > rest {
                    continue;
                }
                let x_mm = (x as f64 + 0.5) * sx;
                let in_liver = liver
                    .map(|(lcx, lcy, lrx, lry)| {
                        let ex = (x_mm - lcx) / lrx;
                        let ey = (y_mm - lcy) / lry;
                        ex * ex + ey * ey <= 1.0
                    })
                    .unwrap_or(false);
                let t: f64 = StandardNormal.sample(&mut rng);
                let hu = if in_liver {
                    liver_hu + LIVER_TEXTURE_HU * t
                } else {
                    TISSUE_HU + TISSUE_TEXTURE_HU * t
                };
                voxels[(z * ny + y) * nx + x] =
                    hu.round().clamp(crate::volume::HU_MIN as f64, crate::volume::HU_MAX as f64)
                        as i16;
            }
        }
    }

    // Measurement regions: circles across the liver's slice span, centers
    // stepped around the liver axis, kept inside the ellipsoid cross-section.
    let mut rois = Vec::with_capacity(params.liver.roi_count);
    let n_rois = params.liver.roi_count;
    for i in 0..n_rois {
        let dz = i as isize - (n_rois as isize / 2);
        let z = (liver_zc as isize + dz.clamp(-(liver_zr as isize - 1), liver_zr as isize - 1))
            as usize;
        let dzf = (z as f64 - liver_zc as f64) / (liver_zr as f64 + 0.5);
        let shrink = (1.0 - dzf * dzf).max(0.0).sqrt();
        let (a0, b0) = params.profile[z];
        let a = a0 * gains[z];
        let b = b0 * gains[z];
        let lcx = cx_mm + params.liver.rel_center.0 * a;
        let lcy = cy_mm + params.liver.rel_center.1 * b;
        let lr_mm = params.liver.rel_radii.0.min(params.liver.rel_radii.1) * a.min(b) * shrink;
        let angle = i as f64 / n_rois as f64 * std::f64::consts::TAU;
        let off = 0.30 * lr_mm;
        let roi_r_mm = 0.30 * lr_mm;
        rois.push(Roi {
            slice: z,
            center: (
                (lcx + off * angle.cos()) / sx - 0.5,
                (lcy + off * angle.sin()) / sy - 0.5,
            ),
            radius: roi_r_mm / sx.max(sy),
        });
    }

    let volume = Volume::new(nx, ny, nz, params.spacing, voxels)?;
    let mean_hu = mean_liver_hu(&volume, &rois, rois.len().min(8))?;
    let label = LiverLabel::from_mean_hu(mean_hu, &params.calib(), rois);
    Ok(PhantomSubject {
        volume,
        label,
        generative_fat_pct: fat,
    })
}

// ---------------------------------------------------------------------------
// Cohort generation
// ---------------------------------------------------------------------------

/// Cohort-level generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub seed: u64,
    /// Target grade proportions (must sum to 1).
    pub grade_mix: [f64; 4],
    /// Label jitter σ in percentage points.
    pub sigma_pct: f64,
    /// Anatomy nuisance amplitude: 0 disables all per-subject shape
    /// variation beyond adiposity, 1 is the default cohort.
    pub shape_jitter: f64,
    pub thresholds: [f64; 3],
    /// Depth-map side length.
    pub map_size: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n: 315,
            seed: 7,
            grade_mix: [122.0 / 315.0, 107.0 / 315.0, 42.0 / 315.0, 44.0 / 315.0],
            sigma_pct: 1.5,
            shape_jitter: 1.0,
            thresholds: [5.0, 15.0, 25.0],
            map_size: 64,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("cohort size must be positive".into()));
        }
        let sum: f64 = self.grade_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.grade_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grade mix must be non-negative and sum to 1, got {:?}",
                self.grade_mix
            )));
        }
        if self.sigma_pct < 0.0 || self.shape_jitter < 0.0 {
            return Err(Error::InvalidArgument(
                "sigma and shape jitter must be >= 0".into(),
            ));
        }
        if self.map_size == 0 {
            return Err(Error::InvalidArgument("map size must be positive".into()));
        }
        FatCalib {
            thresholds: self.thresholds,
            ..FatCalib::default()
        }
        .validate()
    }

    /// Per-grade subject counts by largest remainder; sums to n.
    pub fn grade_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        let mut rem: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0;
        for g in 0..4 {
            let exact = self.grade_mix[g] * self.n as f64;
            counts[g] = exact.floor() as usize;
            assigned += counts[g];
            rem.push((g, exact - exact.floor()));
        }
        rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (g, _) in rem.into_iter().take(self.n - assigned) {
            counts[g] += 1;
        }
        counts
    }
}

const GRID_NX: usize = 128;
const GRID_NY: usize = 128;
const GRID_NZ: usize = 96;
const GRID_SPACING: [f32; 3] = [4.5, 3.5, 4.5];
const BASE_HALF_A_MM: f64 = 140.0;
const BASE_HALF_B_MM: f64 = 95.0;

/// Margin (percentage points) kept between sampled generative fat and the
/// grade boundaries, so the measured label (within 0.5 pp of generative)
/// always lands in the intended grade.
const GRADE_MARGIN_PCT: f64 = 0.6;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn subject_seed(seed: u64, subject: usize, nonce: u64) -> u64 {
    splitmix64(seed ^ splitmix64(subject as u64 + 1) ^ splitmix64(nonce.wrapping_mul(0x9E37)))
}

/// Base torso taper: left-right half-axis factor over body height
/// (0 = hips, 1 = shoulders), waist locally narrowest.
fn taper_a(u: f64) -> f64 {
    0.94 + 0.28 * (u - 0.46) * (u - 0.46)
}

fn taper_b(u: f64) -> f64 {
    0.96 + 0.10 * (u - 0.5) * (u - 0.5)
}

/// Build one subject's parameters: anatomy nuisance from the subject
/// stream, adiposity resampled (with a fresh phantom seed nonce) until the
/// generative fat lands inside the target grade band with margin.
fn subject_params(spec: &CohortSpec, subject: usize, grade: u8) -> Result<PhantomParams> {
    let j = spec.shape_jitter;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(subject as u64 + 1);

    let size: f64 = 1.0 + rng.random_range(-0.12..0.12) * j;
    let aspect: f64 = 1.0 + rng.random_range(-0.08..0.08) * j;
    let height_frac: f64 = 0.70 + rng.random_range(-0.10..0.10) * j;
    let body_slices = ((GRID_NZ as f64) * height_frac).round() as usize;
    let max_start = GRID_NZ - body_slices;
    let z_start: usize = if max_start == 0 || j == 0.0 {
        max_start / 2
    } else {
        let jitter_span = ((max_start as f64) * j).min(max_start as f64);
        let center = max_start as f64 / 2.0;
        (center + rng.random_range(-0.5..0.5) * jitter_span)
            .round()
            .clamp(0.0, max_start as f64) as usize
    };
    let (w1, p1, w2, p2): (f64, f64, f64, f64) = (
        rng.random_range(0.0..0.04) * j,
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..0.03) * j,
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let off_x = rng.random_range(-12.0..12.0) * j;
    let off_y = rng.random_range(-9.0..9.0) * j;

    let mut profile = vec![(0.0, 0.0); GRID_NZ];
    for (i, p) in profile.iter_mut().skip(z_start).take(body_slices).enumerate() {
        let u = i as f64 / (body_slices - 1).max(1) as f64;
        let wiggle = 1.0
            + w1 * (std::f64::consts::TAU * u + p1).cos()
            + w2 * (2.0 * std::f64::consts::TAU * u + p2).cos();
        let a = BASE_HALF_A_MM * size * aspect * taper_a(u) * wiggle;
        let b = BASE_HALF_B_MM * size / aspect * taper_b(u) * wiggle;
        *p = (a, b);
    }

    // Generative-fat band for the target grade, shrunk by the margin.
    let bounds = [0.0, spec.thresholds[0], spec.thresholds[1], spec.thresholds[2], FAT_MAX];
    let lo = if grade == 0 { 0.0 } else { bounds[grade as usize] + GRADE_MARGIN_PCT };
    let hi = bounds[grade as usize + 1] - if grade == 3 { 0.0 } else { GRADE_MARGIN_PCT };
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "grade {grade} band [{lo}, {hi}] is empty under margin sampling"
        )));
    }

    let mut params = PhantomParams {
        nx: GRID_NX,
        ny: GRID_NY,
        nz: GRID_NZ,
        spacing: GRID_SPACING,
        profile,
        adiposity: 0.0,
        label_noise_pct: spec.sigma_pct,
        center_offset_mm: (off_x, off_y),
        liver: LiverPlacement::default(),
        thresholds: spec.thresholds,
        seed: 0,
    };
    for nonce in 0..10_000u64 {
        let v: f64 = rng.random_range((lo / FAT_PER_ADIPOSITY).min(1.0)..=(hi / FAT_PER_ADIPOSITY).min(1.0));
        params.adiposity = v;
        params.seed = subject_seed(spec.seed, subject, nonce);
        let fat = params.generative_fat_pct();
        if fat >= lo && fat < hi || (grade == 3 && fat >= lo) {
            return Ok(params);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not sample grade {grade} within 10000 tries"
    )))
}

/// One generated cohort subject, before any file output.
pub struct CohortSubject {
    pub id: String,
    pub grade_target: u8,
    pub subject: PhantomSubject,
    pub maps: crate::volume::DepthMapPair,
}

/// Deterministic grade assignment: the per-grade counts laid out in order,
/// then shuffled by the cohort seed.
pub fn grade_assignment(spec: &CohortSpec) -> Vec<u8> {
    let counts = spec.grade_counts();
    let mut grades: Vec<u8> = (0..4u8)
        .flat_map(|g| std::iter::repeat_n(g, counts[g as usize]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher–Yates, fixed draw order.
    for i in (1..grades.len()).rev() {
        let k = rng.random_range(0..=i);
        grades.swap(i, k);
    }
    grades
}

/// Generate the cohort in memory (parallel over subjects, output ordered by
/// subject index).
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<CohortSubject>> {
    spec.validate()?;
    let grades = grade_assignment(spec);
    grades
        .par_iter()
        .enumerate()
        .map(|(i, &grade)| {
            let params = subject_params(spec, i, grade)?;
            let subject = generate_phantom_full(&params)?;
            let maps = project_depth_maps(
                &subject.volume,
                DEFAULT_BODY_THRESHOLD_HU,
                spec.map_size,
                &subject_id(i),
            )?;
            Ok(CohortSubject {
                id: subject_id(i),
                grade_target: grade,
                subject,
                maps,
            })
        })
        .collect()
}

pub fn subject_id(i: usize) -> String {
    format!("s{i:04}")
}

/// Generate a cohort and write maps + manifest (and optionally volumes and
/// their measurement regions) under `out_dir`. Returns the manifest rows.
pub fn generate_dataset(
    spec: &CohortSpec,
    out_dir: impl AsRef<Path>,
    keep_volumes: bool,
) -> Result<Vec<ManifestRow>> {
    let out = out_dir.as_ref();
    let cohort = generate_cohort(spec)?;
    let mut rows = Vec::with_capacity(cohort.len());
    let mut rois = BTreeMap::new();
    for cs in &cohort {
        let map_rel = format!("maps/{}.bsm", cs.id);
        write_depth_maps(out.join(&map_rel), &cs.maps)?;
        if keep_volumes {
            write_volume(out.join(format!("volumes/{}.sfv", cs.id)), &cs.subject.volume)?;
            rois.insert(cs.id.clone(), cs.subject.label.rois.clone());
        }
        rows.push(ManifestRow {
            id: cs.id.clone(),
            frontal_path: map_rel.clone(),
            lateral_path: map_rel,
            fat_pct: cs.subject.label.fat_pct,
            grade: cs.subject.label.grade,
            mean_hu: cs.subject.label.mean_hu,
        });
    }
    write_manifest(out.join("manifest.csv"), &rows)?;
    if keep_volumes {
        let json = serde_json::to_string_pretty(&rois)?;
        crate::io::write_file(&out.join("rois.json"), json.as_bytes())?;
    }
    Ok(rows)
}

/// Test oracle for the shape–fat coupling: the largest frontal-map row mass.
/// For σ = 0 and zero shape jitter this is strictly monotone in fat.
pub fn waist_mass(maps: &crate::volume::DepthMapPair) -> f64 {
    let s = maps.size;
    (0..s)
        .map(|r| maps.frontal[r * s..(r + 1) * s].iter().map(|&v| v as f64).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec(n: usize, seed: u64) -> CohortSpec {
        CohortSpec {
            n,
            seed,
            map_size: 32,
            ..CohortSpec::default()
        }
    }

    fn lone_params(v: f64, sigma: f64, seed: u64) -> PhantomParams {
        let spec = CohortSpec {
            shape_jitter: 0.0,
            sigma_pct: sigma,
            ..quick_spec(4, seed)
        };
        let mut p = subject_params(&spec, 0, 0).unwrap();
        p.adiposity = v;
        p.label_noise_pct = sigma;
        p.seed = seed;
        p
    }

    #[test]
    fn zero_adiposity_is_grade_zero() {
        let p = lone_params(0.0, 0.0, 3);
        let s = generate_phantom_full(&p).unwrap();
        assert!(s.generative_fat_pct == 0.0);
        assert!(s.label.fat_pct < 0.5, "recovered {}", s.label.fat_pct);
        assert_eq!(s.label.grade, 0);
    }

    #[test]
    fn full_adiposity_hits_forty_percent_and_grade_three() {
        let p = lone_params(1.0, 0.0, 4);
        let s = generate_phantom_full(&p).unwrap();
        assert_eq!(s.generative_fat_pct, 40.0);
        assert!((s.label.fat_pct - 40.0).abs() < 0.5);
        assert_eq!(s.label.grade, 3);
        // Waist gain: peak slice half-axes exactly 1.6× the base profile.
        let gains = p.waist_gains();
        let peak = gains.iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(peak, 1.6);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = lone_params(0.6, 1.5, 9);
        let a = generate_phantom_full(&p).unwrap();
        let b = generate_phantom_full(&p).unwrap();
        assert_eq!(a.volume.voxels(), b.volume.voxels());
        assert_eq!(a.label, b.label);
        assert_eq!(a.generative_fat_pct, b.generative_fat_pct);
    }

    #[test]
    fn labels_recover_generative_fat() {
        let spec = quick_spec(12, 5);
        for cs in generate_cohort(&spec).unwrap() {
            let err = (cs.subject.label.fat_pct - cs.subject.generative_fat_pct).abs();
            assert!(err < 0.5, "{}: recovery error {err}", cs.id);
            assert_eq!(cs.subject.label.grade, cs.grade_target);
            assert!(cs.subject.label.rois.len() >= 8);
        }
    }

    #[test]
    fn exact_grade_counts_and_uniform_mix() {
        let spec = CohortSpec {
            n: 4,
            grade_mix: [0.25; 4],
            ..quick_spec(4, 11)
        };
        let mut got = [0usize; 4];
        for cs in generate_cohort(&spec).unwrap() {
            got[cs.subject.label.grade as usize] += 1;
        }
        assert_eq!(got, [1, 1, 1, 1]);
    }

    #[test]
    fn default_mix_counts_are_paper_histogram() {
        let spec = CohortSpec::default();
        assert_eq!(spec.grade_counts(), [122, 107, 42, 44]);
    }

    #[test]
    fn two_seeds_differ_in_labels_but_not_counts() {
        let a = generate_cohort(&quick_spec(8, 1)).unwrap();
        let b = generate_cohort(&quick_spec(8, 2)).unwrap();
        let fat = |c: &[CohortSubject]| c.iter().map(|s| s.subject.label.fat_pct).collect::<Vec<_>>();
        assert_ne!(fat(&a), fat(&b));
        let counts = |c: &[CohortSubject]| {
            let mut n = [0usize; 4];
            for s in c {
                n[s.subject.label.grade as usize] += 1;
            }
            n
        };
        assert_eq!(counts(&a), counts(&b));
    }

    #[test]
    fn clean_cohort_waist_mass_sorts_by_fat() {
        let spec = CohortSpec {
            sigma_pct: 0.0,
            shape_jitter: 0.0,
            ..quick_spec(12, 21)
        };
        let cohort = generate_cohort(&spec).unwrap();
        let mut pairs: Vec<(f64, f64)> = cohort
            .iter()
            .map(|cs| (waist_mass(&cs.maps), cs.subject.generative_fat_pct))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // Depth extents are voxel-quantized, so subjects whose adiposity
        // differs by less than a voxel of waist width tie in mass; the
        // ordering claim applies across strictly different masses.
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                if pairs[j].0 > pairs[i].0 {
                    assert!(
                        pairs[j].1 > pairs[i].1,
                        "mass {} < {} but fat {} >= {}",
                        pairs[i].0,
                        pairs[j].0,
                        pairs[i].1,
                        pairs[j].1
                    );
                }
            }
        }
    }

    #[test]
    fn dataset_writes_maps_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = quick_spec(4, 2);
        let rows = generate_dataset(&spec, dir.path(), true).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(dir.path().join("manifest.csv").exists());
        assert!(dir.path().join("maps/s0000.bsm").exists());
        assert!(dir.path().join("volumes/s0000.sfv").exists());
        assert!(dir.path().join("rois.json").exists());
        let again = crate::io::read_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(rows, again);
    }
}
