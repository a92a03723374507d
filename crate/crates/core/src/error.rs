use thiserror::Error;

/// Errors produced by problem construction, hypergradient evaluation and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("generalized Jacobian is singular at the evaluation point")]
    SingularSystem,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("slope fit needs at least {needed} rows in the window, found {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("{path}:{line}: {message}")]
    ConfigParse { path: String, line: usize, message: String },

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
