//! Library error type for I/O, formats and configuration.
//!
//! Shape and channel contracts of tensor operations are programming errors
//! and panic instead; everything reachable from user input returns `Err`.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CdcnError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; aborted")]
    NonFinite { what: String, step: usize },
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl CdcnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdcnError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CdcnError::Dataset(_) | CdcnError::Config(_) | CdcnError::Eval(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CdcnError>;
