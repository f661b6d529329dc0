use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("negative radicand {value} for degree {j}")]
    NegativeRadicand { j: u32, value: f64 },

    #[error("cluster of weight {weight} has {size} modes, exceeding the bound {bound}")]
    ClusterBound { weight: u32, size: usize, bound: f64 },

    #[error("spectral hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("incompatible layouts: {0}")]
    LayoutMismatch(String),

    #[error("flavor mismatch: expected {expected}, found {found}")]
    FlavorMismatch { expected: String, found: String },

    #[error("matrix is not in normal form (defect {defect:e})")]
    NotNormalForm { defect: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("smallness condition violated: {0}")]
    Smallness(String),

    #[error("small divisor {value:e} below threshold {threshold:e} ({family})")]
    SmallDivisor {
        family: String,
        value: f64,
        threshold: f64,
    },

    #[error("Lie series diverges: {0}")]
    LieDivergence(String),

    #[error("schedule gate violated: {0}")]
    Gate(String),

    #[error("every parameter sample was excluded at step {step}")]
    AllExcluded { step: usize },

    #[error("step {step} failed to contract: ratio {ratio:e}")]
    NonContraction { step: usize, ratio: f64 },

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, KamError>;

impl From<std::io::Error> for KamError {
    fn from(e: std::io::Error) -> Self {
        KamError::Io(e.to_string())
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(KamError::InvalidInput(msg.into()))
}
