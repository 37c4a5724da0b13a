use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
