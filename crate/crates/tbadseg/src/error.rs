//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("grid alignment mismatch: {0}")]
    Alignment(String),

    #[error("corrupt label map: {0}")]
    CorruptLabel(String),

    #[error("invalid intensity: {0}")]
    InvalidIntensity(String),

    #[error("no voxel exceeds the foreground threshold")]
    EmptyForeground,

    #[error("patch size {patch:?} exceeds volume shape {shape:?}")]
    PatchTooLarge { patch: [usize; 3], shape: [usize; 3] },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    DivergedTraining { epoch: usize, reason: String },

    #[error("degenerate target: every class is absent")]
    DegenerateTarget,

    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
