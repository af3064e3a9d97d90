use std::path::PathBuf;

/// Errors surfaced by data ingestion, configuration, and pipeline stages.
///
/// Tensor-op contract violations (shape mismatches, non-finite values) are
/// programming errors and panic with a message naming the offending op; see
/// the `tensor` module.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("duplicate segmentation entry for channel (ieta={ieta}, iphi={iphi}, depth={depth})")]
    DuplicateChannel { ieta: i32, iphi: i32, depth: i32 },
    #[error("channel coordinate out of bounds: (ieta={ieta}, iphi={iphi}, depth={depth})")]
    CoordinateOutOfBounds { ieta: i32, iphi: i32, depth: i32 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("renormalizer produced a normalizer below floor at depth {depth}: {value}")]
    NormalizerFloor { depth: usize, value: f64 },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
