use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate entity id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: reserved entity id {id:?} may not appear in a KB file")]
    ReservedId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty index")]
    EmptyIndex,
    #[error("training diverged at {0}")]
    Diverged(String),
    #[error("bad parameter file: {0}")]
    BadParamFile(String),
    #[error("unknown {kind} {name:?}; registered: {known}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, message: impl std::fmt::Display) -> Self {
        Error::Stage {
            stage,
            message: message.to_string(),
        }
    }
}
