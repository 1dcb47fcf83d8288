use thiserror::Error;

use crate::gp::GpCalibrator;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension index {index} out of range for K = {k}")]
    InvalidDimension { index: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("probability level {0} outside the open interval (0, 1)")]
    InvalidProbability(f64),

    #[error("matrix is not positive definite (smallest pivot {pivot:e})")]
    NotPositiveDefinite { pivot: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite likelihood at batch sample {index}")]
    NonFiniteLikelihood { index: usize },

    /// Training produced a non-finite ELBO; `last_valid` holds the parameters
    /// from the last step that evaluated cleanly.
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_valid: Box<GpCalibrator>,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
