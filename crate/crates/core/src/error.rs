use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{file}: row {row}, column `{column}`: {reason}")]
    Csv {
        file: String,
        row: usize,
        column: String,
        reason: String,
    },
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for invalid input, 3 for runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Mask(_)
            | Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::Csv { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Json(_) => 2,
            Error::Tensor(TensorError::ShapeMismatch { .. }) => 2,
            Error::Tensor(_) | Error::Io { .. } | Error::Divergence { .. } | Error::Singular(_) => 3,
        }
    }
}
