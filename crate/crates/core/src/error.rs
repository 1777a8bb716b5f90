use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid hand model assets: {0}")]
    InvalidAssets(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{count} point(s) at or behind the camera plane, first indices {indices:?}")]
    BehindCamera { count: usize, indices: Vec<usize> },

    #[error("degenerate normalization context: {0}")]
    DegenerateNormalization(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn behind_camera(indices: Vec<usize>) -> Self {
        let count = indices.len();
        Error::BehindCamera {
            count,
            indices: indices.into_iter().take(8).collect(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
