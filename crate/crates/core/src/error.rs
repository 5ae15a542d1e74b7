use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{msg} at line {line}")]
    Parse { line: usize, msg: String },

    #[error("link {i}-{j} out of bounds for {n}x{m} sentence pair at line {line}")]
    LinkOutOfBounds {
        line: usize,
        i: usize,
        j: usize,
        n: usize,
        m: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),

    #[error("vocabulary overflow: {found} entries exceed configured size {limit} ({side})")]
    VocabOverflow {
        side: &'static str,
        found: usize,
        limit: usize,
    },

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
