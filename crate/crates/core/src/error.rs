use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory {index} has {len} steps, fewer than the window length {window}")]
    TrajectoryTooShort { index: usize, len: usize, window: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("column index {index} out of range for {columns} columns")]
    IndexOutOfRange { index: usize, columns: usize },

    #[error("invalid column subset: {0}")]
    InvalidSubset(String),

    #[error("selection size {k} out of range [1, {columns}]")]
    KOutOfRange { k: usize, columns: usize },

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite state encountered at step {step}")]
    NonFiniteState { step: usize },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
