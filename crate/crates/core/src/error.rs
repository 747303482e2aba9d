use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Mesh file could not be parsed; carries path and 1-based line number.
    MalformedMesh {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    /// A geometric or numeric precondition was violated.
    InvalidInput(String),
    /// Array shapes disagree with the operation contract.
    ShapeMismatch { expected: String, got: String },
    /// A sample cannot participate (e.g. vehicle fully occluded, s = 0).
    DegenerateSample(String),
    /// Manifest or checkpoint contents violate a stated invariant.
    InvariantViolation(String),
    /// Training failed to reach a required gate.
    TrainingFailure(String),
    /// Non-finite loss encountered; carries a diagnostic of the offending step.
    NonFiniteLoss(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MalformedMesh { path, line, reason } => {
                write!(f, "malformed mesh {}:{}: {}", path.display(), line, reason)
            }
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::DegenerateSample(msg) => write!(f, "degenerate sample: {msg}"),
            Error::InvariantViolation(msg) => write!(f, "invariant violation: {msg}"),
            Error::TrainingFailure(msg) => write!(f, "training failure: {msg}"),
            Error::NonFiniteLoss(msg) => write!(f, "non-finite loss: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
