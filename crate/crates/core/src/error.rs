//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: data/parse problems exit 1,
//! configuration and usage problems exit 2, numeric failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structured parse error pointing at a line of an input file.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Tensor or embedding dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input data violates a documented precondition.
    #[error("invalid data: {0}")]
    Data(String),

    /// Configuration or usage error.
    #[error("invalid config: {0}")]
    Config(String),

    /// Non-finite values or a failed numeric check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 1 data, 2 usage/config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Shape(_) | Error::Data(_) | Error::Io(_) => 1,
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
