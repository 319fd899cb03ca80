//! In-memory volume and label-map types.
//!
//! Array index order is `(x, y, z)`, matching the on-disk NIfTI layout where
//! x varies fastest. All downstream modules inherit this convention.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Label codes used throughout the pipeline.
pub const BACKGROUND: u8 = 0;
/// True lumen.
pub const TL: u8 = 1;
/// False lumen.
pub const FL: u8 = 2;
/// False lumen thrombosis.
pub const FLT: u8 = 3;

pub const NUM_CLASSES: usize = 4;

/// Voxel-to-world transform, row-major 4x4.
pub type Affine = [[f64; 4]; 4];

/// Diagonal affine for a given spacing with the origin at zero.
pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 4];
    for i in 0..3 {
        a[i][i] = spacing[i];
    }
    a[3][3] = 1.0;
    a
}

/// Dense 3D scalar image with spacing (mm) and a voxel-to-world affine.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub id: String,
}

/// Dense 3D integer label map aligned with a [`Volume`].
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub id: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], affine: Affine, id: impl Into<String>) -> Result<Self> {
        let v = Volume { data, spacing, affine, id: id.into() };
        v.validate()?;
        Ok(v)
    }

    /// Volume with a diagonal affine derived from the spacing.
    pub fn with_spacing(data: Array3<f32>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        Self::new(data, spacing, diagonal_affine(spacing), id)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self) -> Result<()> {
        for &s in &self.spacing {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Contract(format!("non-positive spacing {:?}", self.spacing)));
            }
        }
        if self.data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Contract("zero-sized volume axis".into()));
        }
        // column norms of the rotation part must match spacing
        for j in 0..3 {
            let norm = (0..3).map(|i| self.affine[i][j] * self.affine[i][j]).sum::<f64>().sqrt();
            if (norm - self.spacing[j]).abs() > 1e-6 * self.spacing[j].max(1.0) {
                return Err(Error::Contract(format!(
                    "affine column {j} norm {norm} does not match spacing {}",
                    self.spacing[j]
                )));
            }
        }
        Ok(())
    }
}

impl LabelMap {
    pub fn new(data: Array3<u8>, spacing: [f64; 3], affine: Affine, id: impl Into<String>) -> Result<Self> {
        let l = LabelMap { data, spacing, affine, id: id.into() };
        l.validate()?;
        Ok(l)
    }

    pub fn with_spacing(data: Array3<u8>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        Self::new(data, spacing, diagonal_affine(spacing), id)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&v) = self.data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::CorruptLabel(format!("label value {v} outside 0..=3")));
        }
        Ok(())
    }

    /// True when any voxel carries the FLT class.
    pub fn has_flt(&self) -> bool {
        self.data.iter().any(|&v| v == FLT)
    }

    /// Check shape/spacing/affine agreement with a paired volume.
    pub fn check_aligned(&self, vol: &Volume) -> Result<()> {
        if self.data.shape() != vol.data.shape() {
            return Err(Error::Alignment(format!(
                "label shape {:?} != image shape {:?}",
                self.data.shape(),
                vol.data.shape()
            )));
        }
        for i in 0..3 {
            if (self.spacing[i] - vol.spacing[i]).abs() > 1e-6 {
                return Err(Error::Alignment("spacing mismatch between label and image".into()));
            }
        }
        Ok(())
    }

    /// Per-class voxel counts.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &v in self.data.iter() {
            counts[v as usize] += 1;
        }
        counts
    }
}
