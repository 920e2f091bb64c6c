use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Shapes, channel counts or level counts that do not line up.
    #[error("structural mismatch: {0}")]
    Structural(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("solver did not converge after {iterations} iterations (rms {rms})")]
    NonConvergence { iterations: usize, rms: f64 },
    #[error("training failed at step {step}: {message}")]
    Training { step: u64, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("image format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}
