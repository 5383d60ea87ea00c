use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid feature: {0}")]
    InvalidFeature(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimensions(_) => "invalid-dimensions",
            Error::OutOfRange(_) => "out-of-range",
            Error::InvalidSequence(_) => "invalid-sequence",
            Error::InvalidFeature(_) => "invalid-feature",
            Error::Shape { .. } => "shape",
            Error::ResourceLimit(_) => "resource-limit",
            Error::DegenerateMap(_) => "degenerate-map",
            Error::InvalidConfig(_) => "invalid-config",
            Error::NonFinite { .. } => "non-finite",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
