//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QvpoError>;

#[derive(Debug, Error)]
pub enum QvpoError {
    /// A vector or matrix did not have the length the contract requires.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A precondition on an argument was violated (negative weight, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-facing configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Inputs that are well-formed but admit no meaningful answer.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl QvpoError {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            QvpoError::Config(_) | QvpoError::Parse { .. } => 1,
            QvpoError::NonFinite(_) | QvpoError::Degenerate(_) => 2,
            QvpoError::DimensionMismatch { .. } | QvpoError::Contract(_) => 2,
            QvpoError::Io(_) | QvpoError::Serde(_) => 3,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(QvpoError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
