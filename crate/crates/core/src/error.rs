use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported derivative order {0} (expected 0, 1 or 2)")]
    UnsupportedOrder(usize),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("query outside domain: {0}")]
    Domain(String),

    #[error("log contains no parseable laser scans ({skipped} other lines skipped)")]
    EmptyLog { skipped: usize },

    #[error("unsupported document: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
