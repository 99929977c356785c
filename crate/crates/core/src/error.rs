use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}; crop the input first (random window for training, center crop for evaluation)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("metadata errors:\n{}", .0.join("\n"))]
    Metadata(Vec<String>),
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("stale fingerprint for stage {stage}; changed keys: {}", .changed.join(", "))]
    StaleFingerprint { stage: String, changed: Vec<String> },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
