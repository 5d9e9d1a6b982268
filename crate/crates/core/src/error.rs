use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("cannot write {path}: {reason}")]
    ImageWrite { path: PathBuf, reason: String },

    #[error("zero-dimension image: {0}")]
    ZeroDimension(PathBuf),

    #[error("corrupt sidecar {path}: {reason}")]
    CorruptSidecar { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("invalid mask template: {0}")]
    InvalidTemplate(String),

    #[error("degenerate triangulation: {0}")]
    DegenerateTriangulation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
