use std::path::PathBuf;

/// Errors produced anywhere in the odometry core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("keyframe {0} has its depth gate enabled but no prior attached")]
    MissingPrior(u64),

    #[error("reduced pose system is singular")]
    SingularSystem,

    #[error("keyframe {0} has no outgoing edges")]
    NoEdges(u64),

    #[error("frame graph is not initialized")]
    NotInitialized,

    #[error("gate reference was already set")]
    GateAlreadySet,

    #[error("degenerate affine fit: prior map is constant")]
    DegenerateFit,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("dimension mismatch: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("timestamps must increase strictly (entry {index}: {previous} then {current})")]
    NonMonotoneTimestamps { index: usize, previous: f64, current: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("association failure: only {0} matched poses")]
    AssociationFailure(usize),

    #[error("frame {frame}: ray at pixel ({x}, {y}) violates the scene frustum ({reason})")]
    FrustumViolation {
        frame: usize,
        x: usize,
        y: usize,
        reason: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("frame {frame}: {source}")]
    Pipeline {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
