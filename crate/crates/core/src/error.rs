//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A structural knob (kernel size, stride, extent) is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented precondition was violated at runtime.
    #[error("contract violation in {op}: {details}")]
    Contract { op: &'static str, details: String },

    /// Input data failed validation (unknown word, non-one-hot mask, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file did not parse; `offset` is the byte position where it failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A numeric diagnostic (NaN gradient, NaN loss) with its location.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub fn contract(op: &'static str, details: impl Into<String>) -> Self {
        Error::Contract { op, details: details.into() }
    }
}
