use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("track {track} is outside the vocabulary (size {vocab_size})")]
    OutOfVocab { track: usize, vocab_size: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("unsupported file: {0}")]
    Version(String),

    #[error("stale index: built with model {index}, queried with model {model}")]
    StaleIndex { index: String, model: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
