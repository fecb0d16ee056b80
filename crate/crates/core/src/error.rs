use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or divisibility requirements do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity reached a place that requires finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Failures while decoding checkpoint or dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated while reading {section}")]
    Truncated { section: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
