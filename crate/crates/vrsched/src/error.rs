use thiserror::Error;

/// Errors surfaced by the library. Variants carry enough context to name the
/// violated precondition without access to the call site.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid feature set: {0}")]
    InvalidFeatures(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stratum {stratum} is empty")]
    EmptyStratum { stratum: usize },

    #[error("infeasible size constraint: n = {n} but k * n_min = {k} * {n_min} = {}", k * n_min)]
    InfeasibleConstraint { n: usize, k: usize, n_min: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(
        "stratum {stratum} holds {size} samples, fewer than the {m} requested \
         without replacement; use shuffle-cycle draws or raise n_min"
    )]
    StratumTooSmall { stratum: usize, size: usize, m: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("plan was modified outside the caches: plan revision {plan}, cache revision {caches}")]
    StaleCaches { plan: u64, caches: u64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
