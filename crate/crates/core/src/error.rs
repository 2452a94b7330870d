use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("label/audio mismatch: {0}")]
    Alignment(String),

    #[error("bad container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn container(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Container {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by non-finite values during optimization or inference.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
