//! Error type shared by every fallible operation in the crate.

use thiserror::Error;

/// Unified error for tensor ops, configuration, and harness I/O.
#[derive(Debug, Error)]
pub enum DmkdError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: String, details: String },

    /// An axis argument is out of range for the operand's rank.
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis { op: String, axis: usize, rank: usize },

    /// `backward` was called on a tensor that is not a single scalar.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    /// A parameter handed to the optimizer has no gradient populated.
    #[error("optimizer step: parameter {index} ({name}) has no gradient")]
    MissingGrad { index: usize, name: String },

    /// Attention temperature must be strictly positive.
    #[error("temperature must be > 0, got {value}")]
    NonPositiveTemperature { value: f64 },

    /// Mask thresholds live strictly between 0 and 1.
    #[error("{name} must lie in (0, 1), got {value}")]
    ThresholdOutOfRange { name: String, value: f64 },

    /// A mask tensor contained a value other than 0.0 or 1.0.
    #[error("{op}: mask must be binary, found {value} at index {index}")]
    NonBinaryInput { op: String, value: f64, index: usize },

    /// A checkpoint file failed structural validation.
    #[error("invalid checkpoint: {0}")]
    CheckpointInvalid(String),

    /// A run configuration failed validation.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    /// Wrapper for filesystem and serialization failures.
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for DmkdError {
    fn from(e: std::io::Error) -> Self {
        DmkdError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for DmkdError {
    fn from(e: serde_json::Error) -> Self {
        DmkdError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DmkdError>;
