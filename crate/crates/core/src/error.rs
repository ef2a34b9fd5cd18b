use thiserror::Error;

/// Errors raised by the kernel matrix-vector machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("n = {n} exceeds the dense oracle cap of {cap}")]
    OracleCap { n: usize, cap: usize },

    #[error("count {t} out of range (at most {max})")]
    OutOfRange { t: usize, max: usize },

    /// The input vector is zero; the product is trivially zero.
    #[error("trivial input: x is the zero vector")]
    TrivialInput,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("estimator failure on {} row(s), first at row {}", rows.len(), rows.first().copied().unwrap_or(0))]
    EstimatorFailure { rows: Vec<usize> },

    #[error(transparent)]
    Format(#[from] crate::io::FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_param(
    name: &'static str,
    value: f64,
    ok: bool,
    reason: &'static str,
) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason,
        })
    }
}
