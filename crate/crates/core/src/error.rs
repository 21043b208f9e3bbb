//! Crate-wide error type.

use thiserror::Error;

use crate::train::EpochRecord;

/// Errors surfaced by the library.
///
/// `Domain` marks mathematically invalid inputs (e.g. a score requested at
/// t = 0 for a degenerate target), `Config` marks invalid parameter
/// combinations that a caller should fix, `Model` marks structurally broken
/// target models, and `Provider` marks a score source that cannot serve a
/// requested timestep.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("score provider error: {0}")]
    Provider(String),
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("training error: {message}")]
    Training {
        message: String,
        trace: Vec<EpochRecord>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub fn provider(msg: impl Into<String>) -> Self {
        Error::Provider(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
