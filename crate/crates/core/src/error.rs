//! Crate-wide error type.

use std::io;

use thiserror::Error;

pub type Result<T, E = GastonError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GastonError {
    /// An edge or query does not respect a relation's node-type signature.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary or text file does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input whose content violates an invariant.
    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GastonError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GastonError::Argument(msg.into())
    }
}
