use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("probability at index {index} is not strictly positive ({value})")]
    ZeroOrNegativeProb { index: usize, value: f64 },
    #[error("support point {index} duplicates an earlier point")]
    DuplicateSupportPoint { index: usize },
    #[error("invalid support: {0}")]
    InvalidSupport(String),
    #[error("score function is attached to a different distribution")]
    DistributionMismatch,
    #[error("score function is not mean-zero (mean = {mean:e})")]
    NotMeanZero { mean: f64 },
    #[error("spanning set has no direction above the drop tolerance")]
    EmptySpan,
    #[error("moment condition fails at theta0 (norm of E[m] = {norm:e})")]
    MomentNotSatisfied { norm: f64 },
    #[error("moment covariance matrix is singular")]
    SingularSigma,
    #[error("sample moment covariance matrix is singular")]
    SingularSigmaHat,
    #[error("expected Jacobian of the moments is rank deficient")]
    RankDeficientJacobian,
    #[error("null model violated: {0}")]
    NullModelViolated(String),
    #[error("tangent space of the null model is not nested in the maintained model (residual {residual:e})")]
    NestingViolated { residual: f64 },
    #[error("tilt t = {t} leaves the positivity region of the linear path")]
    PositivityViolated { t: f64 },
    #[error("J test has zero degrees of freedom (just-identified model)")]
    DegenerateDof,
    #[error("zero is not in the interior of the convex hull of the moment vectors")]
    Infeasible,
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("design matrix X'X is singular")]
    SingularDesign,
    #[error("instrument Gram matrix Z'Z is singular")]
    SingularInstrumentGram,
    #[error("first stage is rank deficient")]
    RankDeficientFirstStage,
    #[error("basis label {got} is not {expected}")]
    WrongSubspaceLabel { expected: String, got: String },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid experiment configuration: {0}")]
    ConfigInvalid(String),
    #[error("{failed} of {reps} replications failed")]
    TooManyFailures { failed: usize, reps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
