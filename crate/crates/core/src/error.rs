use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SgiError>;

#[derive(Debug, Error)]
pub enum SgiError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),
}

impl SgiError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SgiError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SgiError::Config(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        SgiError::Corrupt(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        SgiError::Numeric(msg.into())
    }
}
