use std::path::PathBuf;

use plume_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("outside source coverage at the {corner} corner ({lat:.5}, {lon:.5})")]
    OutOfCoverage { corner: String, lat: f64, lon: f64 },
    #[error("rejected points with non-finite values at indices {0:?}")]
    RejectedPoints(Vec<usize>),
    #[error("{file}:{line}: rejected record: {reason}")]
    RejectedRecord { file: String, line: u64, reason: String },
    #[error("incomplete patch: {0}")]
    IncompletePatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config fingerprint mismatch: checkpoint has {found}, configuration gives {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
