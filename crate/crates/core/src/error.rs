use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid algebra: {0}")]
    InvalidAlgebra(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("dilation factor must be positive, got {0}")]
    NonpositiveLambda(f64),
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("non-finite state encountered at t = {t}")]
    Nonfinite { t: f64 },
    #[error("no shooting start converged within covector budget {budget}")]
    NotReached { budget: f64 },
    #[error("shooting failed: best residual {residual:e} exceeds tolerance {tol:e}")]
    ShootingFailed { residual: f64, tol: f64 },
    #[error("point is not a smooth point of the distance ({0})")]
    NotSmoothPoint(String),
    #[error("unstable derivative: Richardson difference {difference:e} exceeds {limit:e}")]
    UnstableDerivative { difference: f64, limit: f64 },
    #[error("end-point differential is rank deficient (sigma_min = {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },
    #[error("degenerate denominator: integral of h^2 is {0:e}")]
    DegenerateDenominator(f64),
    #[error("distance {d} outside the domain of the comparison function (limit {limit})")]
    DomainViolation { d: f64, limit: f64 },
    #[error("too few samples retained: {retained} of {drawn}")]
    TooFewSamples { retained: usize, drawn: usize },
    #[error("flow left the smooth locus at t = {t}")]
    LeftSmoothLocus { t: f64 },
    #[error("volume estimators disagree by {gap:.4} (limit {limit})")]
    EstimatorDisagreement { gap: f64, limit: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad input rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidAlgebra(_)
                | Error::UnknownModel(_)
                | Error::NonpositiveLambda(_)
                | Error::InvalidInput(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
