use thiserror::Error;

/// Errors raised across the toolkit. The variant names double as the
/// module-level error tags written into failed run reports.
#[derive(Debug, Error)]
pub enum SlqError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The range inclusion or positivity condition on `K = R + DᵀPD` failed.
    #[error("riccati singular at t = {time}: {detail}")]
    RiccatiSingular { time: f64, detail: String },

    #[error("finite escape at time index {index}, path {path}")]
    FiniteEscape { index: usize, path: usize },

    #[error("regression design matrix is rank deficient at time index {index}")]
    RegressionSingular { index: usize },

    #[error("driver singular at time index {index}, path {path}: R + P = {value:e}")]
    DriverSingular { index: usize, path: usize, value: f64 },

    #[error("feedback synthesis infeasible ({tag}): {count} violating sample points, first {listed:?}")]
    SynthesisInfeasible {
        tag: String,
        count: usize,
        /// At most 100 offending `(t, path)` pairs.
        listed: Vec<(f64, usize)>,
    },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal numerical error: {0}")]
    Internal(String),
}

impl SlqError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SlqError::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SlqError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short tag naming the failing module, used in run reports.
    pub fn module_tag(&self) -> &'static str {
        match self {
            SlqError::InvalidArgument(_) => "invalid-argument",
            SlqError::RiccatiSingular { .. } | SlqError::FiniteEscape { .. } => "riccati",
            SlqError::RegressionSingular { .. } | SlqError::DriverSingular { .. } => "riccati",
            SlqError::SynthesisInfeasible { .. } => "feedback",
            SlqError::Config { .. } => "cli",
            SlqError::Io(_) => "io",
            SlqError::Internal(_) => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, SlqError>;
