//! Error type shared across the pipeline.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid input, configuration, or violated precondition.
    Validation(String),
    /// File could not be read or written.
    Io { path: PathBuf, source: std::io::Error },
    /// File exists but its content is malformed.
    Parse { path: PathBuf, line: usize, msg: String },
    /// Tensor operation received incompatible shapes.
    Shape { op: &'static str, msg: String },
    /// Failure during execution (non-finite loss, exhausted retries, ...).
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    /// True for errors caused by bad inputs rather than execution failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Shape { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in {} (line {line}): {msg}", path.display())
            }
            Error::Shape { op, msg } => write!(f, "shape error in {op}: {msg}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
