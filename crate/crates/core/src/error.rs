use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] numgrad::Error),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("checkpoint was written for a different architecture:\n{0}")]
    ConfigMismatch(String),

    #[error("normalization statistics differ between checkpoint and dataset")]
    StatsMismatch,

    #[error("scenario frame must be normalized before encoding")]
    NotNormalized,

    #[error("unknown suite {0:?}")]
    UnknownSuite(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("planner failed at tick {tick}: {source}")]
    Planner { tick: usize, source: Box<Error> },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }
}
