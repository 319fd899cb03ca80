//! Stochastic training-time augmentation.
//!
//! Every sample receives a patch crop; with `probability` it additionally
//! receives an independently sampled subset of axis flips, quarter-turn
//! rotations, and an additive intensity shift. Spatial transforms are exact
//! voxel permutations, so label classes are moved, never relabeled; the
//! intensity shift only touches the image.

use ndarray::{Array3, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialAxis {
    X,
    Y,
    Z,
}

impl SpatialAxis {
    pub fn index(self) -> usize {
        match self {
            SpatialAxis::X => 0,
            SpatialAxis::Y => 1,
            SpatialAxis::Z => 2,
        }
    }
}

/// Rotation plane for axis-aligned quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationPlane {
    Xy,
    Xz,
    Yz,
}

impl RotationPlane {
    pub fn axes(self) -> (usize, usize) {
        match self {
            RotationPlane::Xy => (0, 1),
            RotationPlane::Xz => (0, 2),
            RotationPlane::Yz => (1, 2),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub probability: f64,
    pub patch_size: [usize; 3],
    pub flip_axes: Vec<SpatialAxis>,
    pub rotations: Vec<RotationPlane>,
    pub intensity_shift_max: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.2,
            patch_size: [96, 96, 96],
            flip_axes: vec![SpatialAxis::X, SpatialAxis::Y, SpatialAxis::Z],
            rotations: vec![RotationPlane::Xy, RotationPlane::Xz, RotationPlane::Yz],
            intensity_shift_max: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("augment probability {} outside [0,1]", self.probability)));
        }
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::Config("patch_size components must be at least 1".into()));
        }
        if self.intensity_shift_max < 0.0 {
            return Err(Error::Config("intensity_shift_max must be non-negative".into()));
        }
        Ok(())
    }

    /// Independent per-worker stream derived from (seed, case, epoch).
    pub fn rng_for(&self, case_id: &str, epoch: usize) -> ChaCha8Rng {
        let mut h = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for b in case_id.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ epoch as u64).wrapping_mul(0x0000_0100_0000_01b3);
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// Record of the transforms applied to one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppliedTransforms {
    pub augmented: bool,
    pub patch_origin: [usize; 3],
    pub flipped: Vec<SpatialAxis>,
    pub rotation: Option<(RotationPlane, u8)>,
    pub intensity_shift: f32,
}

/// Extract an axis-aligned patch of exactly `patch_size`.
///
/// With `bias_foreground`, the patch center is drawn from nonzero-label
/// voxels with probability 0.5 (uniform over the volume otherwise, and as a
/// fallback when no foreground exists).
pub fn extract_patch(
    volume: &Volume,
    label: &LabelMap,
    patch_size: [usize; 3],
    rng: &mut impl RngCore,
    bias_foreground: bool,
) -> Result<(Volume, LabelMap, [usize; 3])> {
    label.check_aligned(volume)?;
    let shape = volume.shape();
    for a in 0..3 {
        if patch_size[a] > shape[a] {
            return Err(Error::PatchTooLarge { patch: patch_size, shape });
        }
    }
    let center_biased = bias_foreground && rng.random::<f64>() < 0.5;
    let origin = if center_biased {
        let foreground: Vec<[usize; 3]> = label
            .data
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|((x, y, z), _)| [x, y, z])
            .collect();
        if foreground.is_empty() {
            uniform_origin(shape, patch_size, rng)
        } else {
            let c = foreground[rng.random_range(0..foreground.len())];
            let mut origin = [0usize; 3];
            for a in 0..3 {
                let lo = c[a].saturating_sub(patch_size[a] / 2);
                origin[a] = lo.min(shape[a] - patch_size[a]);
            }
            origin
        }
    } else {
        uniform_origin(shape, patch_size, rng)
    };

    let vslice = volume
        .data
        .slice(ndarray::s![
            origin[0]..origin[0] + patch_size[0],
            origin[1]..origin[1] + patch_size[1],
            origin[2]..origin[2] + patch_size[2]
        ])
        .to_owned();
    let lslice = label
        .data
        .slice(ndarray::s![
            origin[0]..origin[0] + patch_size[0],
            origin[1]..origin[1] + patch_size[1],
            origin[2]..origin[2] + patch_size[2]
        ])
        .to_owned();
    let v = Volume::with_spacing(vslice, volume.spacing, volume.id.clone())?;
    let l = LabelMap::with_spacing(lslice, label.spacing, label.id.clone())?;
    Ok((v, l, origin))
}

fn uniform_origin(shape: [usize; 3], patch: [usize; 3], rng: &mut impl RngCore) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        let slack = shape[a] - patch[a];
        origin[a] = if slack == 0 { 0 } else { rng.random_range(0..=slack) };
    }
    origin
}

fn flip_axis<T: Clone>(data: &Array3<T>, axis: usize) -> Array3<T> {
    let mut out = data.clone();
    out.invert_axis(Axis(axis));
    out.as_standard_layout().to_owned()
}

/// Quarter-turn rotation in a plane; `k` is the number of 90 degree turns.
fn rotate_quarter<T: Clone + Default>(data: &Array3<T>, plane: RotationPlane, k: u8) -> Array3<T> {
    let (a, b) = plane.axes();
    let mut out = data.clone();
    for _ in 0..(k % 4) {
        // one turn: transpose the plane axes then invert the first
        out.swap_axes(a, b);
        out.invert_axis(Axis(a));
        out = out.as_standard_layout().to_owned();
    }
    out
}

/// Apply the configured stochastic augmentation to one (image, label) pair.
pub fn augment_sample(
    volume: &Volume,
    label: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut impl RngCore,
) -> Result<(Volume, LabelMap, AppliedTransforms)> {
    cfg.validate()?;
    let (mut vol, mut lab, patch_origin) = extract_patch(volume, label, cfg.patch_size, rng, true)?;
    let mut applied = AppliedTransforms { patch_origin, ..Default::default() };

    if rng.random::<f64>() < cfg.probability {
        applied.augmented = true;
        for &axis in &cfg.flip_axes {
            if rng.random::<f64>() < 0.5 {
                vol.data = flip_axis(&vol.data, axis.index());
                lab.data = flip_axis(&lab.data, axis.index());
                applied.flipped.push(axis);
            }
        }
        if !cfg.rotations.is_empty() && rng.random::<f64>() < 0.5 {
            let plane = cfg.rotations[rng.random_range(0..cfg.rotations.len())];
            let (a, b) = plane.axes();
            // quarter turns only keep the grid when the plane is square
            if vol.shape()[a] == vol.shape()[b] {
                let k = rng.random_range(1..4u8);
                vol.data = rotate_quarter(&vol.data, plane, k);
                lab.data = rotate_quarter(&lab.data, plane, k);
                applied.rotation = Some((plane, k));
            }
        }
        if cfg.intensity_shift_max > 0.0 && rng.random::<f64>() < 0.5 {
            let shift = rng.random_range(-cfg.intensity_shift_max..=cfg.intensity_shift_max);
            vol.data.mapv_inplace(|v| (v + shift).clamp(0.0, 1.0));
            applied.intensity_shift = shift;
        }
    }
    Ok((vol, lab, applied))
}

/// Replay the spatial part of an [`AppliedTransforms`] record on an
/// auxiliary channel (e.g. a frozen upstream probability map) so it stays
/// aligned with the augmented image. The intensity shift is image-only and
/// is not replayed.
pub fn replay_spatial(
    data: &Array3<f32>,
    applied: &AppliedTransforms,
    patch_size: [usize; 3],
) -> Array3<f32> {
    let o = applied.patch_origin;
    let mut out = data
        .slice(ndarray::s![
            o[0]..o[0] + patch_size[0],
            o[1]..o[1] + patch_size[1],
            o[2]..o[2] + patch_size[2]
        ])
        .to_owned();
    for &axis in &applied.flipped {
        out = flip_axis(&out, axis.index());
    }
    if let Some((plane, k)) = applied.rotation {
        out = rotate_quarter(&out, plane, k);
    }
    out
}
