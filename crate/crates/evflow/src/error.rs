//! Crate-wide error type with CLI exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters (exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/field shape mismatch (exit code 2).
    #[error("shape error: {0}")]
    Shape(String),

    /// A requested time window is not covered by the available data (exit code 3).
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Malformed input file or directory (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite values or numerically invalid state (exit code 4).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Metric requested over an empty pixel set (exit code 3).
    #[error("empty evaluation: no valid pixels in the evaluation mask")]
    EmptyEvaluation,
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn coverage(msg: impl Into<String>) -> Self {
        Error::Coverage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Coverage(_) | Error::Data(_) | Error::Io(_) | Error::EmptyEvaluation => 3,
            Error::Numeric(_) => 4,
        }
    }
}
