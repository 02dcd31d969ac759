use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty mask has no box")]
    EmptyMask,

    #[error("more targets than queries ({targets} targets, {queries} queries)")]
    MoreTargetsThanQueries { targets: usize, queries: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; batch ids: {batch_ids:?}")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Checkpoint(#[from] safetensors::SafeTensorError),
}

impl Error {
    /// True for errors caused by bad user input (malformed files, invalid
    /// config values) as opposed to runtime failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::EmptyMask
                | Error::MoreTargetsThanQueries { .. }
        )
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
