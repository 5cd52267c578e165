//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error("container: {0}")]
    Container(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training aborted at iteration {iter}: {message}")]
    Train { iter: usize, message: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn shape(message: impl Into<String>) -> Error {
        Error::Shape(message.into())
    }
}
