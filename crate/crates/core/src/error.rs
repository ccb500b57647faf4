use std::path::PathBuf;

use stealthpatch_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("config key `{key}`: {problem} (expected {expected})")]
    Config {
        key: String,
        expected: String,
        problem: String,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value in loss term `{0}`")]
    NonFinite(String),
    #[error("scale state: {0}")]
    ScaleState(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model: {0}")]
    Model(String),
    #[error("model `{model}` misclassifies the clean image (predicted {predicted}, label {label})")]
    CleanMisclassified {
        model: String,
        predicted: usize,
        label: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Self::DimensionMismatch {
            what,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
