use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cannot pool an empty token set")]
    EmptyPool,

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt tensor file: {0}")]
    Corruption(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("need at least 2 tokens to mask, got {0}")]
    TooFewTokens(usize),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("modality error: {0}")]
    Modality(String),

    #[error("degenerate score set: {0}")]
    DegenerateSet(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at step {step}: {msg}")]
    NonFiniteLoss { step: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::EmptyPool => "empty_pool",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Geometry(_) => "geometry",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::TooFewTokens(_) => "too_few_tokens",
            Error::DegenerateEmbedding(_) => "degenerate_embedding",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::Modality(_) => "modality",
            Error::DegenerateSet(_) => "degenerate_set",
            Error::Parse { .. } => "parse",
            Error::Sample { .. } => "sample",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
