use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("digit {digit} is absent from the {partition} partition")]
    MissingDigit { digit: u8, partition: &'static str },

    #[error("malformed corpus: {0}")]
    Corpus(String),

    #[error("checksum mismatch: manifest declares {expected}, contents hash to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite {method} score for {sample_id}")]
    NonFiniteScore { method: &'static str, sample_id: String },

    #[error("empty training set: {0}")]
    EmptyTrainingSet(&'static str),

    #[error("label {0} is not in {{0, 1}}")]
    InvalidLabel(String),

    #[error("ROC analysis needs both classes present ({positives} anomalies, {negatives} normals)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("method {method} needs a {model} model")]
    MissingModel { method: &'static str, model: &'static str },

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
