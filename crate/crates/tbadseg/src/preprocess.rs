//! Deterministic intensity and geometry normalization.
//!
//! The same chain runs at train and inference time: HU windowing to [0,1],
//! resampling to a uniform target spacing (trilinear for images, nearest for
//! labels), and a threshold-based foreground crop whose box is kept so
//! predictions can be pasted back onto the original grid.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Affine, LabelMap, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub hu_min: f64,
    pub hu_max: f64,
    pub target_spacing: [f64; 3],
    pub crop_margin: usize,
    /// Normalized-intensity threshold defining the foreground.
    pub foreground_threshold: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            hu_min: -500.0,
            hu_max: 1000.0,
            target_spacing: [1.5, 1.5, 1.5],
            crop_margin: 4,
            foreground_threshold: 0.05,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_min >= self.hu_max {
            return Err(Error::Config(format!("hu_min {} must be below hu_max {}", self.hu_min, self.hu_max)));
        }
        if self.target_spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("target_spacing components must be positive".into()));
        }
        Ok(())
    }
}

/// Clamp to [hu_min, hu_max] and map affinely onto [0,1].
pub fn clip_and_normalize(volume: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    if volume.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidIntensity(format!("non-finite voxel in case {}", volume.id)));
    }
    let lo = cfg.hu_min as f32;
    let hi = cfg.hu_max as f32;
    let scale = 1.0 / (hi - lo);
    let data = volume.data.mapv(|v| (v.clamp(lo, hi) - lo) * scale);
    Volume::new(data, volume.spacing, volume.affine, volume.id.clone())
}

fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for i in 0..3 {
        out[i] = ((shape[i] as f64 * spacing[i] / target[i]).ceil() as usize).max(1);
    }
    out
}

fn resampled_affine(affine: &Affine, spacing: [f64; 3], target: [f64; 3]) -> Affine {
    let mut out = *affine;
    for j in 0..3 {
        for i in 0..3 {
            out[i][j] = affine[i][j] / spacing[j] * target[j];
        }
    }
    out
}

/// Trilinear resampling of an image onto the target spacing.
pub fn resample_image(volume: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let shape = volume.shape();
    let out_shape = resampled_shape(shape, volume.spacing, cfg.target_spacing);
    let src = &volume.data;
    let data = Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(x, y, z)| {
        let mut coord = [0.0f64; 3];
        for (axis, &idx) in [x, y, z].iter().enumerate() {
            coord[axis] = idx as f64 * cfg.target_spacing[axis] / volume.spacing[axis];
        }
        trilinear(src, coord)
    });
    Volume::new(
        data,
        cfg.target_spacing,
        resampled_affine(&volume.affine, volume.spacing, cfg.target_spacing),
        volume.id.clone(),
    )
}

/// Nearest-neighbor resampling of a label map; never invents classes.
pub fn resample_label(label: &LabelMap, cfg: &PreprocessConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let shape = label.shape();
    let out_shape = resampled_shape(shape, label.spacing, cfg.target_spacing);
    let src = &label.data;
    let data = Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(x, y, z)| {
        let mut idx = [0usize; 3];
        for (axis, &i) in [x, y, z].iter().enumerate() {
            let c = i as f64 * cfg.target_spacing[axis] / label.spacing[axis];
            idx[axis] = (c.round() as usize).min(shape[axis] - 1);
        }
        src[[idx[0], idx[1], idx[2]]]
    });
    LabelMap::new(
        data,
        cfg.target_spacing,
        resampled_affine(&label.affine, label.spacing, cfg.target_spacing),
        label.id.clone(),
    )
}

fn trilinear(src: &Array3<f32>, coord: [f64; 3]) -> f32 {
    let shape = src.shape();
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = coord[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = c.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(shape[a] - 1);
        frac[a] = c - f;
    }
    let mut acc = 0.0f64;
    for (dx, wx) in [(i0[0], 1.0 - frac[0]), (i1[0], frac[0])] {
        if wx == 0.0 {
            continue;
        }
        for (dy, wy) in [(i0[1], 1.0 - frac[1]), (i1[1], frac[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dz, wz) in [(i0[2], 1.0 - frac[2]), (i1[2], frac[2])] {
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * src[[dx, dy, dz]] as f64;
            }
        }
    }
    acc as f32
}

/// Axis-aligned crop box on the preprocessed grid; `max` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub full_shape: [usize; 3],
}

impl CropBox {
    pub fn shape(&self) -> [usize; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Tight bounding box of voxels above the foreground threshold, padded by
/// `crop_margin` and clamped to the volume bounds.
pub fn crop_foreground(
    volume: &Volume,
    label: Option<&LabelMap>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Option<LabelMap>, CropBox)> {
    cfg.validate()?;
    if let Some(l) = label {
        l.check_aligned(volume)?;
    }
    let shape = volume.shape();
    let mut min = shape;
    let mut max = [0usize; 3];
    let mut any = false;
    for ((x, y, z), &v) in volume.data.indexed_iter() {
        if v > cfg.foreground_threshold {
            any = true;
            let idx = [x, y, z];
            for a in 0..3 {
                min[a] = min[a].min(idx[a]);
                max[a] = max[a].max(idx[a] + 1);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    for a in 0..3 {
        min[a] = min[a].saturating_sub(cfg.crop_margin);
        max[a] = (max[a] + cfg.crop_margin).min(shape[a]);
    }
    let crop = CropBox { min, max, full_shape: shape };
    let cropped = apply_crop_volume(volume, &crop)?;
    let cropped_label = match label {
        Some(l) => Some(apply_crop_label(l, &crop)?),
        None => None,
    };
    Ok((cropped, cropped_label, crop))
}

fn cropped_affine(affine: &Affine, min: [usize; 3]) -> Affine {
    let mut out = *affine;
    for i in 0..3 {
        out[i][3] = affine[i][3] + (0..3).map(|j| affine[i][j] * min[j] as f64).sum::<f64>();
    }
    out
}

pub fn apply_crop_volume(volume: &Volume, crop: &CropBox) -> Result<Volume> {
    let slice = volume.data.slice(ndarray::s![
        crop.min[0]..crop.max[0],
        crop.min[1]..crop.max[1],
        crop.min[2]..crop.max[2]
    ]);
    Volume::new(
        slice.to_owned(),
        volume.spacing,
        cropped_affine(&volume.affine, crop.min),
        volume.id.clone(),
    )
}

pub fn apply_crop_label(label: &LabelMap, crop: &CropBox) -> Result<LabelMap> {
    let slice = label.data.slice(ndarray::s![
        crop.min[0]..crop.max[0],
        crop.min[1]..crop.max[1],
        crop.min[2]..crop.max[2]
    ]);
    LabelMap::new(
        slice.to_owned(),
        label.spacing,
        cropped_affine(&label.affine, crop.min),
        label.id.clone(),
    )
}

/// Paste a cropped label back into a zero canvas of the original shape.
pub fn paste_label(cropped: &LabelMap, crop: &CropBox, affine: &Affine) -> Result<LabelMap> {
    if cropped.shape() != crop.shape() {
        return Err(Error::Alignment(format!(
            "cropped shape {:?} does not match crop box {:?}",
            cropped.shape(),
            crop.shape()
        )));
    }
    let mut canvas = Array3::<u8>::zeros((crop.full_shape[0], crop.full_shape[1], crop.full_shape[2]));
    canvas
        .slice_mut(ndarray::s![
            crop.min[0]..crop.max[0],
            crop.min[1]..crop.max[1],
            crop.min[2]..crop.max[2]
        ])
        .assign(&cropped.data);
    LabelMap::new(canvas, cropped.spacing, *affine, cropped.id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(data: Array3<f32>, spacing: [f64; 3]) -> Volume {
        Volume::with_spacing(data, spacing, "t").unwrap()
    }

    #[test]
    fn normalization_window_endpoints() {
        let cfg = PreprocessConfig::default();
        let data = Array3::from_shape_vec((3, 1, 1), vec![-600.0, 1000.0, 250.0]).unwrap();
        let out = clip_and_normalize(&vol(data, [1.0; 3]), &cfg).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.0); // clamps at -500
        assert_eq!(out.data[[1, 0, 0]], 1.0);
        assert_eq!(out.data[[2, 0, 0]], 0.5); // midpoint of [-500, 1000]
    }

    #[test]
    fn nan_intensity_rejected() {
        let cfg = PreprocessConfig::default();
        let data = Array3::from_elem((2, 2, 2), f32::NAN);
        assert!(matches!(
            clip_and_normalize(&vol(data, [1.0; 3]), &cfg),
            Err(Error::InvalidIntensity(_))
        ));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_window() {
        // once normalized, re-normalizing with the window remapped to [0,1]
        let cfg = PreprocessConfig::default();
        let data = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| (x + y + z) as f32 * 60.0 - 400.0);
        let once = clip_and_normalize(&vol(data, [1.0; 3]), &cfg).unwrap();
        let unit = PreprocessConfig { hu_min: 0.0, hu_max: 1.0, ..cfg };
        let twice = clip_and_normalize(&once, &unit).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn factor_two_upsample_shape() {
        let cfg = PreprocessConfig::default();
        let data = Array3::from_elem((64, 64, 64), 0.25f32);
        let out = resample_image(&vol(data, [3.0; 3]), &cfg).unwrap();
        assert_eq!(out.shape(), [128, 128, 128]);
        assert_eq!(out.spacing, [1.5; 3]);
        // interpolation preserves constants
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn label_resample_never_invents_classes() {
        use rand::{Rng, SeedableRng};
        let cfg = PreprocessConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((16, 16, 16), |_| *[0u8, 1, 3].get(rng.random_range(0..3)).unwrap());
        let input_set: std::collections::BTreeSet<u8> = data.iter().copied().collect();
        let label = LabelMap::with_spacing(data, [0.75; 3], "t").unwrap();
        let out = resample_label(&label, &cfg).unwrap();
        let out_set: std::collections::BTreeSet<u8> = out.data.iter().copied().collect();
        assert!(out_set.is_subset(&input_set));
        // nearest-neighbor oracle: every output voxel equals the nearest input voxel
        for ((x, y, z), &v) in out.data.indexed_iter() {
            let mut idx = [0usize; 3];
            for (a, &i) in [x, y, z].iter().enumerate() {
                idx[a] = ((i as f64 * 1.5 / 0.75).round() as usize).min(15);
            }
            assert_eq!(v, label.data[[idx[0], idx[1], idx[2]]]);
        }
    }

    #[test]
    fn all_zero_volume_has_no_foreground() {
        let cfg = PreprocessConfig::default();
        let data = Array3::zeros((8, 8, 8));
        assert!(matches!(
            crop_foreground(&vol(data, [1.0; 3]), None, &cfg),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn single_bright_voxel_box() {
        let cfg = PreprocessConfig::default();
        let mut data = Array3::zeros((64, 64, 64));
        data[[10, 10, 10]] = 1.0;
        let (cropped, _, crop) = crop_foreground(&vol(data, [1.0; 3]), None, &cfg).unwrap();
        assert_eq!(crop.min, [6, 6, 6]);
        assert_eq!(crop.max, [15, 15, 15]);
        assert_eq!(cropped.shape(), [9, 9, 9]);
    }

    #[test]
    fn crop_then_paste_preserves_foreground_labels() {
        let spec = crate::phantom::PhantomSpec::default();
        let (volume, label, _) = crate::phantom::generate_phantom(&spec).unwrap();
        let cfg = PreprocessConfig { foreground_threshold: 0.5, ..Default::default() };
        let (cropped_v, cropped_l, crop) = crop_foreground(&volume, Some(&label), &cfg).unwrap();
        let cropped_l = cropped_l.unwrap();
        // brute-force bounding box of the thresholded mask
        let mut min = [usize::MAX; 3];
        let mut max = [0usize; 3];
        for ((x, y, z), &v) in volume.data.indexed_iter() {
            if v > 0.5 {
                for (a, &i) in [x, y, z].iter().enumerate() {
                    min[a] = min[a].min(i);
                    max[a] = max[a].max(i + 1);
                }
            }
        }
        for a in 0..3 {
            assert_eq!(crop.min[a], min[a].saturating_sub(4));
            assert_eq!(crop.max[a], (max[a] + 4).min(64));
            assert!(cropped_v.shape()[a] <= 64);
        }
        let pasted = paste_label(&cropped_l, &crop, &label.affine).unwrap();
        for ((x, y, z), &v) in label.data.indexed_iter() {
            if v != 0 {
                assert_eq!(pasted.data[[x, y, z]], v);
            }
        }
    }

    #[test]
    fn full_chain_is_deterministic() {
        let spec = crate::phantom::PhantomSpec { seed: 3, ..Default::default() };
        let (volume, label, _) = crate::phantom::generate_phantom(&spec).unwrap();
        let cfg = PreprocessConfig { hu_min: 0.0, hu_max: 1.0, target_spacing: [2.0; 3], ..Default::default() };
        let run = || {
            let v = clip_and_normalize(&volume, &cfg).unwrap();
            let v = resample_image(&v, &cfg).unwrap();
            let l = resample_label(&label, &cfg).unwrap();
            let (cv, cl, _) = crop_foreground(&v, Some(&l), &cfg).unwrap();
            (cv.data, cl.unwrap().data)
        };
        let (va, la) = run();
        let (vb, lb) = run();
        assert_eq!(va, vb);
        assert_eq!(la, lb);
    }
}
