use thiserror::Error;

/// Error type shared by all workbench modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument is outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training or evaluation produced a non-finite quantity.
    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    /// A persisted file failed to parse.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A loaded record violated a stored invariant.
    #[error("validation error for session {session_id}: {detail}")]
    Validation { session_id: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
