//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while evaluating a forward model or log density.
#[derive(Debug, Clone, Error)]
pub enum EvalError {
    /// The forward integrator produced a non-finite state.
    #[error("forward model diverged at x = {x:?}: {detail}")]
    ForwardModelFailure { x: Vec<f64>, detail: String },
    /// A point with non-finite coordinates was supplied.
    #[error("non-finite coordinates: {0:?}")]
    NonFinitePoint(Vec<f64>),
}

/// Errors from construction and validation of domain values.
#[derive(Debug, Clone, Error)]
pub enum DomainError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("box domain requires lower[{index}] < upper[{index}] (got {lower} vs {upper})")]
    InvalidBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("parameter vector must have finite entries: {0:?}")]
    NonFinite(Vec<f64>),
    #[error("empty parameter vector")]
    Empty,
}

/// Errors from run configuration validation.
#[derive(Debug, Clone, Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

/// Errors from Gaussian-process training and prediction.
#[derive(Debug, Clone, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 distinct training points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite training target at index {0}")]
    NonFiniteTarget(usize),
    #[error("Gram matrix factorization failed after escalating the nugget to {nugget:.3e}")]
    FactorizationFailure { nugget: f64 },
}

/// Errors from Gaussian-mixture fitting and evaluation.
#[derive(Debug, Clone, Error)]
pub enum MixtureError {
    #[error("need at least {needed} samples to fit up to {max_components} components in {dim}-d, got {got}")]
    TooFewSamples {
        needed: usize,
        got: usize,
        dim: usize,
        max_components: usize,
    },
    #[error("mixture weights must have a positive finite sum, got {0}")]
    InvalidWeights(f64),
    #[error("component {0} covariance is not positive definite")]
    SingularCovariance(usize),
    #[error("EM collapsed to an empty component in every restart; sample set is degenerate")]
    EmptyComponentCollapse,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Errors from the MCMC sampler.
#[derive(Debug, Clone, Error)]
pub enum McmcError {
    #[error("chain initial point has zero target density")]
    InitOutsideSupport,
    #[error("initial point lies outside the sampling domain")]
    InitOutsideDomain,
    #[error("zero acceptance over an entire adaptation window ending at step {step}; target looks broken")]
    ZeroAcceptanceWindow { step: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Top-level error for the adaptive approximation loop.
#[derive(Debug, Error)]
pub enum AgpError {
    #[error("iteration {iteration}: {source}")]
    Gp {
        iteration: usize,
        source: GpError,
    },
    #[error("iteration {iteration}: {source}")]
    Mixture {
        iteration: usize,
        source: MixtureError,
    },
    #[error("iteration {iteration}: {source}")]
    Mcmc {
        iteration: usize,
        source: McmcError,
    },
    #[error("iteration {iteration}: {source}")]
    Eval {
        iteration: usize,
        source: EvalError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("initial design point failed {retries} resampling attempts: {source}")]
    InitialDesignFailure { retries: usize, source: EvalError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
