use std::path::PathBuf;

use reid_autodiff::TensorError;
use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
}

pub type Result<T, E = ReidError> = std::result::Result<T, E>;

impl ReidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReidError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        ReidError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
