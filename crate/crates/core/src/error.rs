use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants map onto the failure modes of the individual operations; numerical
/// failures (`SingularSystem`, `NonFiniteResult`, `DivergedTraining`, ...) are
/// distinguished from validation failures by [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("linear system is singular or not positive definite: {0}")]
    SingularSystem(String),

    #[error("requested rank {rank} exceeds dimension {dim}")]
    InvalidRank { rank: usize, dim: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layer index {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },

    #[error("non-finite value encountered: {0}")]
    NonFiniteResult(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    DivergedTraining { step: usize, loss: f64 },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("target layers {first} and {second} are adjacent; a corrected layer may not also be perturbed")]
    OverlappingLayers { first: usize, second: usize },

    #[error("bootstrap fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),

    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("covariance is singular and no regularizer was given")]
    DegenerateCovariance,

    #[error("truncated sampler accepted {accepted} of {trials} draws (rate below 1e-3)")]
    RejectionStarvation { accepted: usize, trials: usize },

    #[error("oracle did not converge in {iters} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iters: usize, grad_norm: f64 },

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("variance must be strictly positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("input is empty")]
    EmptyInput,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs' shape
    /// or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem(_)
                | Error::NonFiniteResult(_)
                | Error::DivergedTraining { .. }
                | Error::ZeroMatrix
                | Error::NotPsd(_)
                | Error::DegenerateCovariance
                | Error::RejectionStarvation { .. }
                | Error::NoConvergence { .. }
                | Error::NonPositiveVariance(_)
                | Error::ZeroVariance
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
