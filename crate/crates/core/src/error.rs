use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: header key `{key}`: {reason}", path.display())]
    Header {
        path: PathBuf,
        key: String,
        reason: String,
    },

    #[error("{}: payload size mismatch: expected {expected} bytes, found {found}", path.display())]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{}: corrupt file: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward called without a stored forward pass")]
    NoForwardPass,

    #[error("{stage}{}: {source}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Stage {
        stage: String,
        fold: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Wraps an error with the pipeline stage (and fold) it came from.
    pub fn in_stage(self, stage: &str, fold: Option<usize>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            fold,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a filesystem failure rather than bad input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
