use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found: {0}")]
    MissingPath(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed matrix in {path}: {reason}")]
    MalformedMatrix { path: PathBuf, reason: String },

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("malformed report {path}: {reason}")]
    MalformedReport { path: PathBuf, reason: String },

    #[error("insufficient locations: need at least {needed}, found {found}")]
    InsufficientLocations { needed: usize, found: usize },

    #[error("location {location}: {dropped} of {total} pixels are non-finite (limit 1%)")]
    TooManyDropped {
        location: String,
        dropped: usize,
        total: usize,
    },

    #[error("degenerate sphere fit: {0}")]
    DegenerateFit(String),

    #[error("pixel (row {row}, col {col}) lies outside the fitted sphere cap (radicand {radicand})")]
    OutsideSphere { row: usize, col: usize, radicand: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
