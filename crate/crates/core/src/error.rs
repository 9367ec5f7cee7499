use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("freeze violation: {0}")]
    Freeze(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("numerics abort at step {step} (batch {batch}): {msg}")]
    Numerics { step: usize, batch: usize, msg: String },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
