//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("unsupported format version {found} (newest supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("singular denominator: |<x-u, w>| below 1e-12")]
    SingularDenominator,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("resolution insufficient: {0}")]
    ResolutionInsufficient(String),

    #[error("degenerate score distribution: {0}")]
    DegenerateScores(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    /// Process exit code for the CLI. Stable and documented in the README.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Io(_) => 4,
            Error::InsufficientSamples(_) | Error::ResolutionInsufficient(_) => 5,
            _ => 2,
        }
    }
}
