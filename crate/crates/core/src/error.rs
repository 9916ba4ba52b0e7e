use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TendError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TendError {
    /// Invalid or unknown configuration (unknown distortion kind, bad config key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A parameter is outside its documented range or degenerate.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("data error: {0}")]
    Data(String),

    /// A metric is undefined for the given input, e.g. a single-class score list.
    #[error("metric error: {0}")]
    Metric(String),

    #[error("training error: {0}")]
    Training(String),

    /// An API precondition was violated (e.g. margin loss requested before the center exists).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TendError {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        TendError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TendError::Io {
            path: path.into(),
            source,
        }
    }
}
