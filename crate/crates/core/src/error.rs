use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Isa(#[from] crate::isa::IsaError),
    #[error("lowering error: {0}")]
    Lowering(String),
    #[error(transparent)]
    Import(#[from] crate::params_io::ImportError),
    #[error("export error: non-finite value in tensor {tensor} at index {index}")]
    NonFinite { tensor: String, index: usize },
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
