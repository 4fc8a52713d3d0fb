use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: payload size mismatch, expected {expected} bytes, found {actual}")]
    PayloadSize { path: PathBuf, expected: u64, actual: u64 },

    #[error("unknown dtype tag {0:?}")]
    UnknownDtype(String),

    #[error("mask contains non-binary value {value} at offset {offset}")]
    NonBinaryMask { value: u8, offset: usize },

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("frozen tensor {0} changed during training")]
    FrozenTensorChanged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::PayloadSize { .. } => "payload_size",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::NonBinaryMask { .. } => "non_binary_mask",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Config(_) => "config",
            Error::FrozenTensorChanged(_) => "frozen_tensor_changed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
