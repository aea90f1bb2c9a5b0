use thiserror::Error;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate state: cannot normalize a vector of zero norm")]
    DegenerateState,

    #[error("basis truncation drops weight {tail_weight:.3e}")]
    Truncation { tail_weight: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("step size underflow at t = {t}: trial step {dt:.3e} fell below dt_min")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("negative jump rate {rate:.3e} on channel {channel}")]
    NegativeRate { channel: usize, rate: f64 },

    #[error("cutoff overflow at t = {t}: edge population {population:.3e}")]
    CutoffOverflow { t: f64, population: f64 },

    #[error("picture overflow: frame factor exp({exponent:.1}) over one step")]
    PictureOverflow { exponent: f64 },

    #[error("jump time is not bracketed: |psi|^2 = {norm_lo} .. {norm_hi}, threshold {threshold}")]
    NonBracketing {
        norm_lo: f64,
        norm_hi: f64,
        threshold: f64,
    },

    #[error("invalid transition matrix: q(n) dt = {0} exceeds 1")]
    InvalidTransition(f64),

    #[error("deviation is undefined for two identically vanishing series")]
    UndefinedMetric,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("density matrix invariant violated: {0}")]
    InvariantViolation(String),

    #[error("{failed} of {total} trajectories failed; first failure (trajectory {first_index}): {first_message}")]
    EnsembleFailure {
        failed: usize,
        total: usize,
        first_index: usize,
        first_message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
