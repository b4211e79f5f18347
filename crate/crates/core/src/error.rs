use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backward requires scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("saved activations of tape node {0} were freed before backward")]
    FreedActivation(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient entry in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocab hash mismatch: checkpoint was written for {expected}, supplied vocab hashes to {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("objective is not deterministic: baseline evaluated to {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at step {step}: {dump}")]
    Divergence { step: usize, dump: String },

    #[error("insufficient pool for class {class}: need {need} examples, have {have}")]
    InsufficientPool {
        class: usize,
        need: usize,
        have: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
