//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes do not conform for the named primitive.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter unit expected by an operation is absent.
    #[error("missing parameter unit `{unit}` in {context}")]
    MissingUnit { unit: String, context: &'static str },

    /// A forward application produced a NaN or infinity.
    #[error("non-finite value produced by `{context}`")]
    NonFinite { context: String },

    /// Malformed configuration (unknown key, bad value, missing requirement).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed data file.
    #[error("data error at {path}:{line}: {detail}")]
    DataFormat {
        path: String,
        line: usize,
        detail: String,
    },

    /// A training phase hit a non-finite loss and stopped.
    #[error("phase `{phase}` aborted at step {step}: {detail}")]
    PhaseAborted {
        phase: String,
        step: usize,
        detail: String,
        /// Last checkpoint written before the abort, if any.
        last_checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
