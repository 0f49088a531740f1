use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-posed design: {0}")]
    IllPosedDesign(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("optimization failed: {message} (best value {best_value:e} at {best_theta:?})")]
    OptimizationFailure {
        message: String,
        best_theta: Vec<f64>,
        best_value: f64,
    },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Domain(_) => "domain",
            Error::IllPosedDesign(_) => "ill-posed-design",
            Error::Numeric(_) => "numeric",
            Error::OptimizationFailure { .. } => "optimization-failure",
            Error::DegenerateModel(_) => "degenerate-model",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
