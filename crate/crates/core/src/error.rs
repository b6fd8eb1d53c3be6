//! Error types.
//!
//! Two failure families are kept apart on purpose: [`DataError`] covers I/O
//! and file-format problems (corrupt NIfTI, missing manifest entries, bad
//! checkpoints), while [`XhvedError`] adds the runtime failures of training
//! and evaluation (non-finite losses, invalid configuration). Shape-contract
//! violations inside the tensor engine are bugs, not recoverable conditions,
//! and panic instead.

use std::path::PathBuf;
use thiserror::Error;

/// I/O and file-format errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a NIfTI-1 file: {reason}")]
    NotNifti { path: PathBuf, reason: String },

    #[error("{path}: unsupported NIfTI feature: {reason}")]
    UnsupportedNifti { path: PathBuf, reason: String },

    #[error("{path}: truncated voxel payload: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    BadInput { path: PathBuf, reason: String },
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Top-level error for training, evaluation and the CLI.
#[derive(Debug, Error)]
pub enum XhvedError {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl XhvedError {
    pub fn config(msg: impl Into<String>) -> Self {
        XhvedError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        XhvedError::Numeric(msg.into())
    }
}
