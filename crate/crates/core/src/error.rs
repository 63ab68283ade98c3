use thiserror::Error;

/// Errors raised across the agent, environment and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid score: {0}")]
    InvalidScore(f64),

    #[error("degenerate calibration fit: {0}")]
    DegenerateFit(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("case generation failed: {0}")]
    Generation(String),

    #[error("tool error: {0}")]
    Tool(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
