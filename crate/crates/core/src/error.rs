use std::io;

use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum PrclError {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    /// Training produced NaN or infinite losses or activations.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PrclError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        PrclError::Contract(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PrclError::Config { .. } => 2,
            PrclError::Io(_) | PrclError::Parse { .. } => 4,
            PrclError::Incompatible(_) => 2,
            PrclError::Contract(_)
            | PrclError::DimensionMismatch { .. }
            | PrclError::NonFinite(_)
            | PrclError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PrclError>;
