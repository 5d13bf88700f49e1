use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("checkpoint version mismatch: file has version {found}, reader supports {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("remote NLI request to {endpoint} failed: {message}")]
    Remote { endpoint: String, message: String },

    #[error("remote NLI protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },

    #[error("remote NLI batch failed at indices {indices:?}")]
    Batch { indices: Vec<usize> },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
