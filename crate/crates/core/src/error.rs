use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed line {line}, field {field}: {reason}")]
    MalformedLine {
        line: usize,
        field: usize,
        reason: String,
    },

    #[error("rotation is not orthonormal (error {error:.3e}){}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    NonOrthonormal { error: f64, line: Option<usize> },

    #[error("trajectory file contains no poses")]
    EmptyTrajectory,

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("unknown {what} `{name}`")]
    UnknownKind { what: &'static str, name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("resolution mismatch: expected {expected:?}, got {actual:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-positive or non-finite depth {value} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f32 },

    #[error("packing mode violation: {0}")]
    ModeViolation(String),

    #[error("{path}: format violation at byte {offset}: {reason}")]
    FormatViolation {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("sequence of {len} tokens exceeds configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("evaluation audit failed: {0}")]
    Audit(String),

    #[error("split hygiene violated: {0}")]
    SplitViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::FormatViolation {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
