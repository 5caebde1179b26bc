use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ODE solver failed at t = {t}: step size underflow")]
    StepUnderflow { t: f64 },

    #[error("non-finite value in right-hand side at t = {t}")]
    NonFinite { t: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors raised while integrating an ODE.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::StepUnderflow { .. } | Error::NonFinite { .. })
    }
}
