//! Attenuation volumes and their reduction to 2-d body-shape depth maps.
//!
//! A [`Volume`] stores signed attenuation values (Hounsfield-unit semantics)
//! on a regular grid, z-major. Each axial slice is thresholded into a body
//! mask (largest connected component, holes filled), reduced to per-column /
//! per-row physical extents, and the per-slice profiles are stacked into
//! frontal and lateral depth maps, resampled to a square image and
//! normalized by a fixed full-scale depth so maps are comparable across
//! subjects.

use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use serde::{Deserialize, Serialize};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// Default tissue/air threshold for body masking.
pub const DEFAULT_BODY_THRESHOLD_HU: f64 = -300.0;

/// Depth-map normalization: this many millimetres of body thickness map to
/// pixel value 1.0.
pub const DEPTH_FULL_SCALE_MM: f64 = 500.0;

/// Side length of paper-scale body shape maps. Desk-scale runs default to 64.
pub const PAPER_MAP_SIZE: usize = 512;

/// Attenuation volume. Voxels are stored z-major:
/// `index = (z·ny + y)·nx + x`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f32; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(nx: usize, ny: usize, nz: usize, spacing: [f32; 3], voxels: Vec<i16>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let expect = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::InvalidArgument("volume dims overflow".into()))?;
        if voxels.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "volume {nx}x{ny}x{nz} implies {expect} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(&bad) = voxels.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "attenuation {bad} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Volume {
            nx,
            ny,
            nz,
            spacing,
            voxels,
        })
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[(z * self.ny + y) * self.nx + x]
    }

    /// One axial slice, row-major over (y, x).
    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.nx * self.ny;
        &self.voxels[z * n..(z + 1) * n]
    }
}

/// Frontal + lateral body shape maps for one subject, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMapPair {
    pub id: String,
    pub size: usize,
    pub frontal: Vec<f32>,
    pub lateral: Vec<f32>,
}

/// A circular region of interest on one axial slice. Center and radius are
/// in voxel units of the slice plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub slice: usize,
    pub center: (f64, f64),
    pub radius: f64,
}

/// Minimum region count for measured (non-phantom) volumes.
pub const MIN_LIVER_ROIS: usize = 8;

/// Body mask of one axial slice: voxels at or above `threshold_hu`, reduced
/// to the largest 4-connected component with interior holes filled. The
/// mask may be empty (air-only slices).
pub fn body_mask(slice: &[i16], nx: usize, ny: usize, threshold_hu: f64) -> Vec<bool> {
    assert_eq!(slice.len(), nx * ny);
    let solid: Vec<bool> = slice.iter().map(|&v| v as f64 >= threshold_hu).collect();
    let component = largest_component(&solid, nx, ny);
    fill_holes(&component, nx, ny)
}

/// Label 4-connected components of `solid`, keep the largest (first found
/// wins ties — scan order is deterministic).
fn largest_component(solid: &[bool], nx: usize, ny: usize) -> Vec<bool> {
    let mut labels = vec![0u32; solid.len()];
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..solid.len() {
        if !solid[start] || labels[start] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut size = 0usize;
        stack.push(start);
        labels[start] = label;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % nx, i / nx);
            let mut visit = |j: usize| {
                if solid[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = label;
        }
    }
    labels.iter().map(|&l| l != 0 && l == best_label).collect()
}

/// Fill interior holes: background connected to the border stays background,
/// everything else becomes mask.
fn fill_holes(mask: &[bool], nx: usize, ny: usize) -> Vec<bool> {
    let mut outside = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut seed = |i: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
        if !mask[i] && !outside[i] {
            outside[i] = true;
            stack.push(i);
        }
    };
    for x in 0..nx {
        seed(x, &mut outside, &mut stack);
        seed((ny - 1) * nx + x, &mut outside, &mut stack);
    }
    for y in 0..ny {
        seed(y * nx, &mut outside, &mut stack);
        seed(y * nx + nx - 1, &mut outside, &mut stack);
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % nx, i / nx);
        let mut visit = |j: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1, &mut outside, &mut stack);
        }
        if x + 1 < nx {
            visit(i + 1, &mut outside, &mut stack);
        }
        if y > 0 {
            visit(i - nx, &mut outside, &mut stack);
        }
        if y + 1 < ny {
            visit(i + nx, &mut outside, &mut stack);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewDirection {
    Frontal,
    Lateral,
}

/// Physical through-thickness of the mask: frontal gives, per column x, the
/// y-extent `(last − first + 1)·spacing`; lateral gives, per row y, the
/// x-extent. Unoccupied columns/rows are 0.
pub fn depth_profile(
    mask: &[bool],
    nx: usize,
    ny: usize,
    direction: ViewDirection,
    spacing_xy: (f64, f64),
) -> Vec<f64> {
    assert_eq!(mask.len(), nx * ny);
    match direction {
        ViewDirection::Frontal => (0..nx)
            .map(|x| {
                let mut first = None;
                let mut last = 0;
                for y in 0..ny {
                    if mask[y * nx + x] {
                        first.get_or_insert(y);
                        last = y;
                    }
                }
                match first {
                    Some(f) => (last - f + 1) as f64 * spacing_xy.1,
                    None => 0.0,
                }
            })
            .collect(),
        ViewDirection::Lateral => (0..ny)
            .map(|y| {
                let mut first = None;
                let mut last = 0;
                for x in 0..nx {
                    if mask[y * nx + x] {
                        first.get_or_insert(x);
                        last = x;
                    }
                }
                match first {
                    Some(f) => (last - f + 1) as f64 * spacing_xy.0,
                    None => 0.0,
                }
            })
            .collect(),
    }
}

/// Per-slice depth profiles stacked into raw maps in millimetres, slice axis
/// on image rows: frontal is nz×nx, lateral is nz×ny.
pub fn project_raw_depth_maps(volume: &Volume, threshold_hu: f64) -> (Vec<f64>, Vec<f64>) {
    let sp = (volume.spacing[0] as f64, volume.spacing[1] as f64);
    let mut frontal = vec![0.0; volume.nz * volume.nx];
    let mut lateral = vec![0.0; volume.nz * volume.ny];
    for z in 0..volume.nz {
        let mask = body_mask(volume.slice(z), volume.nx, volume.ny, threshold_hu);
        let fp = depth_profile(&mask, volume.nx, volume.ny, ViewDirection::Frontal, sp);
        let lp = depth_profile(&mask, volume.nx, volume.ny, ViewDirection::Lateral, sp);
        frontal[z * volume.nx..(z + 1) * volume.nx].copy_from_slice(&fp);
        lateral[z * volume.ny..(z + 1) * volume.ny].copy_from_slice(&lp);
    }
    (frontal, lateral)
}

/// Full projection: raw maps, bilinear resample to `out_size`², and
/// normalization by [`DEPTH_FULL_SCALE_MM`] into [0, 1].
pub fn project_depth_maps(
    volume: &Volume,
    threshold_hu: f64,
    out_size: usize,
    id: &str,
) -> Result<DepthMapPair> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let (raw_f, raw_l) = project_raw_depth_maps(volume, threshold_hu);
    if raw_f.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("no body found in volume".into()));
    }
    let to_map = |raw: &[f64], w: usize| -> Vec<f32> {
        bilinear_resize(raw, volume.nz, w, out_size, out_size)
            .into_iter()
            .map(|v| (v / DEPTH_FULL_SCALE_MM).clamp(0.0, 1.0) as f32)
            .collect()
    };
    Ok(DepthMapPair {
        id: id.to_string(),
        size: out_size,
        frontal: to_map(&raw_f, volume.nx),
        lateral: to_map(&raw_l, volume.ny),
    })
}

/// Mean attenuation over the union of the regions' voxels.
///
/// Requires at least `min_rois` regions (pass 0 or a smaller bound for
/// synthetic volumes) and that every region lies fully inside the volume.
pub fn mean_liver_hu(volume: &Volume, rois: &[Roi], min_rois: usize) -> Result<f64> {
    if rois.len() < min_rois {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_rois} liver regions, got {}",
            rois.len()
        )));
    }
    if rois.is_empty() {
        return Err(Error::InvalidArgument("no liver regions given".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, roi) in rois.iter().enumerate() {
        let (cx, cy) = roi.center;
        let r = roi.radius;
        if roi.slice >= volume.nz
            || !r.is_finite()
            || r < 0.0
            || cx - r < -0.5
            || cy - r < -0.5
            || cx + r > volume.nx as f64 - 0.5
            || cy + r > volume.ny as f64 - 0.5
        {
            return Err(Error::InvalidArgument(format!(
                "liver region {i} extends outside the volume"
            )));
        }
        let x_lo = (cx - r).ceil().max(0.0) as usize;
        let x_hi = (cx + r).floor().min(volume.nx as f64 - 1.0) as usize;
        let y_lo = (cy - r).ceil().max(0.0) as usize;
        let y_hi = (cy + r).floor().min(volume.ny as f64 - 1.0) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    seen.insert((roi.slice, y, x));
                }
            }
        }
    }
    if seen.is_empty() {
        return Err(Error::InvalidArgument(
            "liver regions cover no voxels".into(),
        ));
    }
    let sum: f64 = seen
        .iter()
        .map(|&(z, y, x)| volume.at(x, y, z) as f64)
        .sum();
    Ok(sum / seen.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk_slice(nx: usize, ny: usize, cx: f64, cy: f64, r: f64, inside: i16, outside: i16) -> Vec<i16> {
        let mut s = vec![outside; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    s[y * nx + x] = inside;
                }
            }
        }
        s
    }

    #[test]
    fn air_slice_has_empty_mask() {
        let s = vec![-1000i16; 32 * 32];
        let mask = body_mask(&s, 32, 32, -300.0);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn disk_mask_area_matches_analytic() {
        let (nx, ny, r) = (64, 64, 20.0);
        let s = disk_slice(nx, ny, 31.5, 31.5, r, 0, -1000);
        let mask = body_mask(&s, nx, ny, -300.0);
        let area = mask.iter().filter(|&&m| m).count() as f64;
        let analytic = std::f64::consts::PI * r * r;
        assert!(
            (area - analytic).abs() / analytic < 0.01,
            "area {area}, analytic {analytic}"
        );
    }

    #[test]
    fn interior_bubble_is_filled() {
        let (nx, ny) = (64, 64);
        let solid = disk_slice(nx, ny, 31.5, 31.5, 20.0, 0, -1000);
        let mut holed = solid.clone();
        // Punch a small air pocket near the middle.
        for y in 28..32 {
            for x in 30..35 {
                holed[y * nx + x] = -1000;
            }
        }
        let expect = body_mask(&solid, nx, ny, -300.0);
        let got = body_mask(&holed, nx, ny, -300.0);
        assert_eq!(expect, got);
    }

    #[test]
    fn speckle_outside_body_is_dropped() {
        let (nx, ny) = (64, 64);
        let mut s = disk_slice(nx, ny, 31.5, 31.5, 15.0, 0, -1000);
        s[2 * nx + 2] = 50; // isolated bright voxel
        let mask = body_mask(&s, nx, ny, -300.0);
        assert!(!mask[2 * nx + 2]);
    }

    #[test]
    fn profiles_of_empty_and_rectangle() {
        let (nx, ny) = (10, 8);
        let empty = vec![false; nx * ny];
        assert!(depth_profile(&empty, nx, ny, ViewDirection::Frontal, (1.0, 1.0))
            .iter()
            .all(|&v| v == 0.0));

        let full = vec![true; nx * ny];
        let f = depth_profile(&full, nx, ny, ViewDirection::Frontal, (1.0, 1.0));
        let l = depth_profile(&full, nx, ny, ViewDirection::Lateral, (1.0, 1.0));
        assert!(f.iter().all(|&v| v == ny as f64));
        assert!(l.iter().all(|&v| v == nx as f64));
    }

    #[test]
    fn disk_profile_matches_chord_length() {
        let (nx, ny, r, c) = (64, 64, 20.0, 31.5);
        let s = disk_slice(nx, ny, c, c, r, 0, -1000);
        let mask = body_mask(&s, nx, ny, -300.0);
        let f = depth_profile(&mask, nx, ny, ViewDirection::Frontal, (1.0, 1.0));
        for (x, &v) in f.iter().enumerate() {
            let d = (x as f64 - c).abs();
            if d < r - 1.0 {
                let chord = 2.0 * (r * r - d * d).sqrt();
                assert!((v - chord).abs() <= 1.0 + 1e-9, "col {x}: {v} vs chord {chord}");
            }
        }
    }

    fn box_volume(nx: usize, ny: usize, nz: usize, spacing: [f32; 3], half: (usize, usize), z_range: (usize, usize)) -> Volume {
        let mut vox = vec![-1000i16; nx * ny * nz];
        let (cx, cy) = (nx / 2, ny / 2);
        for z in z_range.0..z_range.1 {
            for y in cy - half.1..cy + half.1 {
                for x in cx - half.0..cx + half.0 {
                    vox[(z * ny + y) * nx + x] = 30;
                }
            }
        }
        Volume::new(nx, ny, nz, spacing, vox).unwrap()
    }

    #[test]
    fn box_phantom_maps_match_extents() {
        // Box of 2·hx × 2·hy voxels at 2 mm spacing: frontal depth = y extent,
        // lateral depth = x extent.
        let v = box_volume(32, 32, 16, [2.0, 2.0, 3.0], (8, 5), (4, 12));
        let (fr, la) = project_raw_depth_maps(&v, -300.0);
        for z in 4..12 {
            for x in 8..24 {
                assert_eq!(fr[z * 32 + x], 10.0 * 2.0);
            }
            for y in 11..21 {
                assert_eq!(la[z * 32 + y], 16.0 * 2.0);
            }
        }
        // Outside the box footprint everything is zero.
        assert_eq!(fr[0], 0.0);
        let pair = project_depth_maps(&v, -300.0, 64, "box").unwrap();
        let expect_f = (20.0 / DEPTH_FULL_SCALE_MM) as f32;
        let expect_l = (32.0 / DEPTH_FULL_SCALE_MM) as f32;
        // Center pixels sit well inside the footprint.
        assert!((pair.frontal[32 * 64 + 32] - expect_f).abs() < 1e-6);
        assert!((pair.lateral[32 * 64 + 32] - expect_l).abs() < 1e-6);
        // Border is exactly zero: the phantom has empty margins.
        for i in 0..64 {
            assert_eq!(pair.frontal[i], 0.0);
            assert_eq!(pair.frontal[63 * 64 + i], 0.0);
        }
    }

    #[test]
    fn resolution_invariance_within_tolerance() {
        let hi = box_volume(64, 64, 32, [1.0, 1.0, 1.5], (16, 10), (8, 24));
        let lo = box_volume(32, 32, 16, [2.0, 2.0, 3.0], (8, 5), (4, 12));
        let s = 48usize;
        let a = project_depth_maps(&hi, -300.0, s, "hi").unwrap();
        let b = project_depth_maps(&lo, -300.0, s, "lo").unwrap();
        let peak = a.frontal.iter().cloned().fold(0.0f32, f32::max);
        // Pointwise 2 % of peak away from the interpolation ramps at the
        // footprint boundary (the one-source-voxel transition bands of the
        // two resolutions legitimately differ); 2 % of peak on average.
        let in_ramp = |m: &[f32], i: usize| {
            let (y, x) = (i / s, i % s);
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s {
                        let v = m[ny as usize * s + nx as usize];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            hi - lo > 1e-6
        };
        let mut total = 0.0f64;
        let mut flat_compared = 0usize;
        for i in 0..s * s {
            let (x, y) = (a.frontal[i], b.frontal[i]);
            total += (x - y).abs() as f64;
            if !in_ramp(&a.frontal, i) && !in_ramp(&b.frontal, i) {
                flat_compared += 1;
                assert!((x - y).abs() <= 0.02 * peak.max(1e-6), "pixel {i}: {x} vs {y}");
            }
        }
        assert!(flat_compared > s * s / 2, "comparison region degenerate");
        assert!(total / (s * s) as f64 <= 0.02 * peak as f64);
    }

    #[test]
    fn all_air_volume_is_an_error() {
        let v = Volume::new(8, 8, 4, [1.0, 1.0, 1.0], vec![-1000; 256]).unwrap();
        let err = project_depth_maps(&v, -300.0, 16, "x").unwrap_err();
        assert!(err.to_string().contains("no body"));
    }

    #[test]
    fn mean_hu_uniform_and_two_regions() {
        let vox = vec![40i16; 32 * 32 * 8];
        let v = Volume::new(32, 32, 8, [1.0, 1.0, 1.0], vox).unwrap();
        let rois: Vec<Roi> = (0..8)
            .map(|i| Roi {
                slice: i,
                center: (16.0, 16.0),
                radius: 3.0,
            })
            .collect();
        assert_eq!(mean_liver_hu(&v, &rois, MIN_LIVER_ROIS).unwrap(), 40.0);

        // Two single-voxel regions at 30 and 50 average to 40.
        let mut vox = vec![0i16; 16 * 16 * 2];
        vox[8 * 16 + 8] = 30;
        vox[(16 + 8) * 16 + 8] = 50;
        let v = Volume::new(16, 16, 2, [1.0, 1.0, 1.0], vox).unwrap();
        let rois = [
            Roi { slice: 0, center: (8.0, 8.0), radius: 0.4 },
            Roi { slice: 1, center: (8.0, 8.0), radius: 0.4 },
        ];
        assert_eq!(mean_liver_hu(&v, &rois, 2).unwrap(), 40.0);
    }

    #[test]
    fn mean_hu_matches_voxel_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (nx, ny, nz) = (24, 24, 6);
        let vox: Vec<i16> = (0..nx * ny * nz).map(|_| rng.random_range(-200..200)).collect();
        let v = Volume::new(nx, ny, nz, [1.0, 1.0, 1.0], vox.clone()).unwrap();
        let rois: Vec<Roi> = (0..10)
            .map(|i| Roi {
                slice: i % nz,
                center: (rng.random_range(6.0..18.0), rng.random_range(6.0..18.0)),
                radius: rng.random_range(1.0..4.0),
            })
            .collect();
        let got = mean_liver_hu(&v, &rois, 8).unwrap();

        let mut seen = std::collections::HashSet::new();
        for roi in &rois {
            for y in 0..ny {
                for x in 0..nx {
                    let dx = x as f64 - roi.center.0;
                    let dy = y as f64 - roi.center.1;
                    if dx * dx + dy * dy <= roi.radius * roi.radius {
                        seen.insert((roi.slice, y, x));
                    }
                }
            }
        }
        let want: f64 = seen
            .iter()
            .map(|&(z, y, x)| vox[(z * ny + y) * nx + x] as f64)
            .sum::<f64>()
            / seen.len() as f64;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn roi_bounds_and_count_checks() {
        let v = Volume::new(16, 16, 2, [1.0, 1.0, 1.0], vec![0; 512]).unwrap();
        let outside = [Roi { slice: 0, center: (15.0, 8.0), radius: 3.0 }];
        assert!(mean_liver_hu(&v, &outside, 0).is_err());
        let ok = [Roi { slice: 0, center: (8.0, 8.0), radius: 2.0 }];
        assert!(mean_liver_hu(&v, &ok, 8).is_err()); // fewer than 8 measured regions
        assert!(mean_liver_hu(&v, &ok, 1).is_ok());
    }

    proptest! {
        #[test]
        fn translation_shifts_raw_maps(dx in 0usize..6, dz in 0usize..4) {
            let base = box_volume(40, 40, 20, [1.0, 1.0, 1.0], (6, 4), (4, 10));
            // Shift the body by rebuilding with offset bounds.
            let mut vox = vec![-1000i16; 40 * 40 * 20];
            for z in 4 + dz..10 + dz {
                for y in 16..24 {
                    for x in 14 + dx..26 + dx {
                        vox[(z * 40 + y) * 40 + x] = 30;
                    }
                }
            }
            let shifted = Volume::new(40, 40, 20, [1.0, 1.0, 1.0], vox).unwrap();
            let (f0, _) = project_raw_depth_maps(&base, -300.0);
            let (f1, _) = project_raw_depth_maps(&shifted, -300.0);
            for z in 4..10 {
                for x in 14..26 {
                    let a = f0[z * 40 + x];
                    let b = f1[(z + dz) * 40 + (x + dx)];
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn dilation_never_decreases_depth(seed in 0u64..u64::MAX) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (nx, ny) = (24, 24);
            let r = rng.random_range(3.0..8.0);
            let s = disk_slice(nx, ny, 11.5, 11.5, r, 0, -1000);
            let mask = body_mask(&s, nx, ny, -300.0);
            // Dilate by one voxel (4-neighbourhood).
            let mut dilated = mask.clone();
            for y in 0..ny {
                for x in 0..nx {
                    if mask[y * nx + x] {
                        if x > 0 { dilated[y * nx + x - 1] = true; }
                        if x + 1 < nx { dilated[y * nx + x + 1] = true; }
                        if y > 0 { dilated[(y - 1) * nx + x] = true; }
                        if y + 1 < ny { dilated[(y + 1) * nx + x] = true; }
                    }
                }
            }
            for dir in [ViewDirection::Frontal, ViewDirection::Lateral] {
                let before = depth_profile(&mask, nx, ny, dir, (1.0, 1.0));
                let after = depth_profile(&dilated, nx, ny, dir, (1.0, 1.0));
                for (b, a) in before.iter().zip(&after) {
                    prop_assert!(a >= b);
                }
            }
        }
    }
}
