use thiserror::Error;

/// Errors raised by the numerical kernels, model builders and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hurwitz: an eigenvalue has real part {max_real:e} >= 0")]
    NotHurwitz { max_real: f64 },

    #[error("eigenvalue iteration did not settle within {budget} sweeps")]
    ConvergenceFailure { budget: usize },

    #[error("Sherman-Morrison denominator {denominator:e} is too close to zero")]
    NumericBreakdown { denominator: f64 },

    #[error("matrix is singular")]
    SingularMatrix,

    #[error("Jacobian is singular at Newton step {step}")]
    SingularJacobian { step: usize },

    #[error("matrix is not row-stochastic: {0}")]
    NotStochastic(String),

    #[error("chain is reducible: stationary mass vanishes at index {index}")]
    Reducible { index: usize },

    #[error("action {action} is not feasible in state {state}")]
    InfeasibleAction { state: usize, action: usize },

    #[error("optimal policy is not unique (argmin margin {margin:e})")]
    NonUniqueOptimalPolicy { margin: f64 },

    #[error("stationary mass of pair {pair} is zero")]
    ZeroStationaryMass { pair: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("step {0} is not on the snapshot grid")]
    SnapshotMissing(u64),

    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidSchedule(_)
                | Error::InfeasibleAction { .. }
                | Error::NotStochastic(_)
                | Error::DimensionMismatch(_)
                | Error::Json(_)
        )
    }
}
