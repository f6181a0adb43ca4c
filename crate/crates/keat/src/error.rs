//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, KeatError>;

#[derive(Debug)]
pub enum KeatError {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Inconsistent or out-of-range configuration.
    Config(String),
    /// Malformed input file; `line` is 1-based where known.
    Parse { path: String, line: usize, message: String },
    /// A primitive produced NaN or Inf.
    NonFinite(String),
    Io(std::io::Error),
}

impl fmt::Display for KeatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(m) => write!(f, "dimension error: {m}"),
            Self::Contract(m) => write!(f, "contract error: {m}"),
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Parse { path, line: 0, message } => {
                write!(f, "parse error: {path}: {message}")
            }
            Self::Parse { path, line, message } => {
                write!(f, "parse error: {path}:{line}: {message}")
            }
            Self::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for KeatError {}

impl From<std::io::Error> for KeatError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl KeatError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse { path: path.into(), line, message: message.into() }
    }
}
