use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} holds {expected} elements but {found} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("top-k with k = {k} exceeds the {available} available entries")]
    TopKTooLarge { k: usize, available: usize },

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("routing override has {found} layers but the policy has {expected}")]
    OverrideLayerMismatch { expected: usize, found: usize },

    #[error("routing override covers {found} positions but {expected} are required")]
    OverrideLengthMismatch { expected: usize, found: usize },

    #[error("routing replay {mode} requires a recorded trace that is missing")]
    MissingReplayTrace { mode: &'static str },

    #[error("response is empty")]
    EmptyResponse,

    #[error("context is empty")]
    EmptyContext,

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("context of length {len} exceeds the {max} supported positions")]
    ContextTooLong { len: usize, max: usize },

    #[error("cannot split {total} records into {parts} equal mini-batches")]
    NotDivisible { total: usize, parts: usize },

    #[error("enumeration would visit {count} sequences, over the budget of {budget}")]
    BudgetExceeded { count: u128, budget: u128 },

    #[error("reference gradient norm {norm:e} is too small for a relative error")]
    DegenerateDirection { norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
