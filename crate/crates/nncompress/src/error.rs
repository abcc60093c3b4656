//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor kernels, training, compression passes, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not compose (matmul inner dims, mask vs weight, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called in a state it cannot handle (missing gradient
    /// key, cache/model mismatch, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// Numeric failure: non-finite inputs or a kernel that failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file does not conform to its binary or JSON format.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset-level inconsistency (missing labels, missing soft targets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Experiment configuration is invalid or incomplete.
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Dimension(_) | Error::State(_) | Error::Config(_) => 1,
            Error::Format(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
