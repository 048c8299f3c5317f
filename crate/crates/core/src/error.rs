//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary input; `offset` is the byte position where decoding failed.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Input data violates a documented invariant (bad label, class mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller-supplied value is outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Tensor shapes do not line up; the message names the offending layer or input.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Two network stacks that must be structurally identical are not.
    #[error("structural mismatch: {0}")]
    Structure(String),

    /// Non-finite values or a failed numerical check.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Problem in a run-config or metadata file.
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
