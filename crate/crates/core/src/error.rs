use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The request would exceed a hard size limit (e.g. exponential enumeration).
    #[error("capacity exceeded: {what} = {got} exceeds limit {limit}")]
    Capacity {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("model has no {0}")]
    Capability(&'static str),

    #[error("format error: {0}")]
    Format(String),

    /// A metric whose inputs make it mathematically undefined.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("adapter protocol error: {0}")]
    Protocol(String),

    #[error("adapter transport error: {0}")]
    Transport(String),

    #[error("adapter timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::UndefinedMetric(_))
    }
}
