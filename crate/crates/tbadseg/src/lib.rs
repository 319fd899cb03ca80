//! Volumetric segmentation pipelines for Type B aortic dissection CTA.
//!
//! The crate covers the full experiment loop at desk scale: NIfTI I/O,
//! preprocessing, augmentation, stratified cohort splitting, toy-scale
//! 3D U-Net / Swin-UnetR / DenseNet models with a tape-based autodiff,
//! the four segmentation pipelines (single-step, sequential, multi-task,
//! ensemble), training with Adam and a step LR schedule, Dice/Hausdorff
//! evaluation, and synthetic dissected-aorta phantoms standing in for
//! clinical data.

pub mod augment;
pub mod cohort;
pub mod config;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nifti;
pub mod phantom;
pub mod pipelines;
pub mod preprocess;
pub mod report;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelMap, Volume};
