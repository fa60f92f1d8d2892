//! Adaptive Gaussian-process approximation of un-normalized Bayesian
//! posteriors with expensive likelihoods.
//!
//! The joint density `f(x) = l(x)·π(x)` is factored as an approximate
//! posterior times an exponentiated GP residual, `f ≈ exp(ĝ)·p̂`, and the
//! pair is refined iteratively: regress the log-residual on the current
//! design set, sample the product with MCMC, re-estimate `p̂` as a Gaussian
//! mixture, stop once successive mixtures agree in KL, and otherwise add
//! design points where the entropy of the log-normal posterior
//! approximation is largest.

pub mod acquisition;
pub mod adaptive;
pub mod config;
pub mod domain;
pub mod error;
pub mod gp;
pub mod mcmc;
pub mod metrics;
pub mod mixture;
pub mod problems;

// re-exports filled in as modules land

pub use domain::{BoxDomain, LogDensity, ParamVector, UniformPrior};
pub use error::AgpError;
pub use gp::{GpModel, GpPrediction, GpSettings, KernelParams};
pub use mixture::{GaussianMixture, SampleBatch};

