//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An extent violates a structural requirement (e.g. FFT sizes must be
    /// powers of two).
    #[error("size error: {0}")]
    Size(String),

    /// A physical quantity is outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN/Inf where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was used out of order (e.g. backward called twice).
    #[error("state error: {0}")]
    State(String),

    /// Dataset on disk is missing or inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
