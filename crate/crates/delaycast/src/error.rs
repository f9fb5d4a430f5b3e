use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("line-list record {index}: report week precedes diagnosis week")]
    ReportBeforeDiagnosis { index: usize },

    #[error("missing triangle cell (season {season}, week {week}, lag {lag})")]
    MissingCell { season: i32, week: u32, lag: u32 },

    #[error("missing validation count (season {season}, week {week})")]
    MissingValidation { season: i32, week: u32 },

    #[error("missing reporting factor (season {season}, week {week}, lag {lag})")]
    MissingFactor { season: i32, week: u32, lag: u32 },

    #[error("reporting factor estimation failed: {0}")]
    Factor(String),

    #[error("GLM fit failed: {0}")]
    Glm(String),

    #[error("GLM did not converge after {iterations} iterations (deviance trace: {trace:?})")]
    GlmNonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("ARMA fit failed: {0}")]
    Arma(String),

    #[error("evaluation failed: {0}")]
    Evaluate(String),

    #[error("simulation failed: {0}")]
    Simulate(String),

    #[error("epidata fetch failed: {0}")]
    Fetch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
