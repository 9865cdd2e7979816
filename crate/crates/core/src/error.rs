//! Error taxonomy shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid experiment or environment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatched dimensions or otherwise invalid operation inputs.
    #[error("input error: {0}")]
    Input(String),

    /// A linear system was singular or too ill-conditioned to solve.
    /// Carries the condition-number estimate of the offending matrix.
    #[error("singular system: condition estimate {cond:.3e} exceeds limit")]
    SingularSystem { cond: f64 },

    /// The stability diagnostic failed: the Jacobian of the estimating
    /// equation is not invertible at the fitted coefficients.
    #[error("stability violation: {0}")]
    StabilityViolation(String),

    /// Value iteration did not reach the residual tolerance.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Two evaluation results were compared under different protocols.
    #[error("evaluation protocol mismatch: {0}")]
    ProtocolMismatch(String),

    /// A structured text file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
