use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// Bad magic, unsupported version or a malformed header.
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: needed {needed} bytes at offset {offset}, only {available} available")]
    Truncated { offset: u64, needed: u64, available: u64 },

    /// Well-formed file carrying invalid values (non-finite floats, inconsistent shapes).
    #[error("data error: {0}")]
    Data(String),

    /// Caller supplied arguments that violate a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A compressed word stream that cannot be decoded.
    #[error("corrupt stream: {0}")]
    Corruption(String),

    #[error("no tensor named {0:?}")]
    UnknownTensor(String),

    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }
}
