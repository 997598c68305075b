use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Problems found while decoding one of the binary formats.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated header: expected {expected} bytes, found {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("empty candidate set at row {row}")]
    EmptyCandidateSet { row: usize },
    #[error("label {label} at row {row} is out of range for K={k}")]
    LabelOutOfRange { row: usize, label: u32, k: u32 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    /// A format violation in an in-memory buffer (no path attached).
    #[error(transparent)]
    Decode(#[from] FormatError),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("shape error: {0}")]
    Shape(String),
}

impl Error {
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn shape(msg: impl fmt::Display) -> Self {
        Error::Shape(msg.to_string())
    }

    pub fn numerical(msg: impl fmt::Display) -> Self {
        Error::Numerical(msg.to_string())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }

    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            Error::Format { source, .. } | Error::Decode(source) => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
