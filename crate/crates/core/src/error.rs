use thiserror::Error;

/// Errors produced by the optimization engine.
#[derive(Debug, Error)]
pub enum BqoError {
    /// Hyperparameters, points or measures disagree on dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The requested operation is not defined for this configuration
    /// (e.g. environmental-coordinate derivatives of a task kernel, or a
    /// Gaussian measure paired with a non-squared-exponential kernel).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// The Gram matrix could not be factorized even after escalating jitter.
    #[error("ill-conditioned model: Cholesky failed with jitter up to {max_jitter:.3e} (diagonal scale {scale:.3e})")]
    IllConditioned { max_jitter: f64, scale: f64 },

    /// A quantity that must be non-negative came out meaningfully negative.
    #[error("numerical consistency violation: {0}")]
    NumericalConsistency(String),

    /// Slice sampling exhausted its shrinkage budget.
    #[error("slice sampler stuck: {0}")]
    SamplerStuck(String),

    /// No optimizer start converged to a usable point.
    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    /// A user-supplied marginal inverse CDF failed monotonicity spot checks.
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    /// The simulator failed while evaluating the integrand.
    #[error("simulator failure: {0}")]
    Simulator(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, BqoError>;
