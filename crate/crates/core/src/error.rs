use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: bad tokens, shapes, indices or empty collections.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent configuration (model sizes, layer sets, missing options).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values, singular systems and other numerical failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: mean NLL = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("optimization failed at step {step}: {reason}")]
    Optimization { step: usize, reason: String },

    /// A per-request failure inside a batch operation.
    #[error("request {id}: {source}")]
    Request {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) | Error::Data(_) | Error::Io { .. } | Error::Format(_) => 3,
            Error::Numeric(_) | Error::Training { .. } | Error::Optimization { .. } => 4,
            Error::Request { source, .. } => source.exit_code(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
