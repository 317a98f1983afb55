use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("empty base set")]
    EmptyBaseSet,

    #[error("empty support set")]
    EmptySupport,

    #[error("attention tensor is not normalized (max deviation {0:e})")]
    Unnormalized(f64),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown label {label:?} ({known} known labels)")]
    UnknownLabel { label: String, known: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("class {0:?} has no instances")]
    EmptyClass(String),

    #[error("bank built with different encoder (expected {expected}, found {found})")]
    FingerprintMismatch { expected: String, found: String },

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("missing checkpoint entry {0:?}")]
    MissingEntry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Configuration-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
