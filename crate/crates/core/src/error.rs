use thiserror::Error;

/// Errors raised by the dataset store, the JSONL interchange and the
/// configuration loaders.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A record id that the store does not know.
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },

    /// A record that breaks the schema or one of its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// An insert whose id is already taken.
    #[error("conflict: {kind} `{id}` already exists")]
    Conflict { kind: &'static str, id: String },

    /// A malformed JSONL line. Line numbers are 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A missing or invalid configuration entry.
    #[error("config error: {0}")]
    Config(String),

    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
