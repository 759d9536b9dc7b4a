//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: malformed record: {message}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: duplicate record key `{key}`", path.display())]
    DuplicateKey {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm embedding")]
    ZeroNormEmbedding,

    #[error("gateway returned HTTP status {status}")]
    Http { status: u16 },

    #[error("network error: {0}")]
    Network(String),

    #[error("backend returned no token logprobs")]
    LogprobsUnsupported,

    #[error("no rating found in evaluator output")]
    NoRating,

    #[error("extracted rating {value} outside the 1..=10 range")]
    RatingOutOfRange { value: i64 },

    #[error("feature layout mismatch: {0}")]
    FeatureLayout(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("record {id} is missing required field {field}")]
    MissingField { id: String, field: &'static str },
}

impl Error {
    /// Whether a gateway request that failed with this error is worth retrying.
    pub(crate) fn is_retryable(&self) -> bool {
        match self {
            Error::Network(_) => true,
            Error::Http { status } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
