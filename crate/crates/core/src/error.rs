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

    #[error("missing feature file for video {0:?}")]
    MissingFeatures(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("non-finite loss in component {part}: {value}")]
    NonFiniteLoss { part: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("prediction/dataset id mismatch: {0:?}")]
    IdMismatch(Vec<String>),

    #[error("all positions masked")]
    AllMasked,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
