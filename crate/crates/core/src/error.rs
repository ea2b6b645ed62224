use thiserror::Error;

use crate::estimator::EstimateResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("position {index} is {distance:.6} m from the blind radio, inside the far-field guard of {guard:.6} m")]
    FarField {
        index: usize,
        distance: f64,
        guard: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("covariance decomposition failed: {0}")]
    Decomposition(String),

    #[error("solver did not converge after {} iterations", .0.iterations)]
    NotConverged(Box<EstimateResult>),

    #[error("{failed} of {runs} Monte Carlo runs did not converge (limit 1%)")]
    ConvergenceRate { failed: usize, runs: usize },

    #[error("infeasible start: {0}")]
    InfeasibleStart(String),

    #[error("insufficient span: {0}")]
    InsufficientSpan(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unit sanity check failed at line {line}: |{value}| dBm exceeds 200")]
    UnitSanity { line: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in the CLI's structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::FarField { .. } => "far_field",
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Decomposition(_) => "decomposition",
            Error::NotConverged(_) => "not_converged",
            Error::ConvergenceRate { .. } => "convergence_rate",
            Error::InfeasibleStart(_) => "infeasible_start",
            Error::InsufficientSpan(_) => "insufficient_span",
            Error::Parse { .. } => "parse",
            Error::UnitSanity { .. } => "unit_sanity",
            Error::Empty(_) => "empty",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
