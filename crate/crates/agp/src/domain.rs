//! Shared domain vocabulary: parameter vectors, bounded boxes, log-density
//! interfaces.
//!
//! Every density in this crate is handled in log space end to end. A log
//! density returns `f64::NEG_INFINITY` exactly when the point lies outside
//! its support and a finite value otherwise; raw densities are never
//! exponentiated except inside well-scaled differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// A point in parameter space with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a parameter vector, rejecting NaN/Inf entries.
    pub fn new(coords: Vec<f64>) -> Result<Self, DomainError> {
        if coords.is_empty() {
            return Err(DomainError::Empty);
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(DomainError::NonFinite(coords));
        }
        Ok(ParamVector(coords))
    }

    /// Number of coordinates.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Axis-aligned bounded region of parameter space (the prior support).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DomainError> {
        if lower.len() != upper.len() {
            return Err(DomainError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(DomainError::Empty);
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DomainError::InvalidBounds {
                    index: i,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Componentwise inclusive membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    /// Side length per coordinate.
    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| hi - lo)
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| 0.5 * (lo + hi))
            .collect()
    }

    /// Affine map onto the unit box `[0,1]^d`.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&xi, (&lo, &hi))| (xi - lo) / (hi - lo))
            .collect()
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn unstandardize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&ui, (&lo, &hi))| lo + ui * (hi - lo))
            .collect()
    }

    /// Clamps a point into the box, coordinate by coordinate.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&xi, (&lo, &hi))| xi.clamp(lo, hi))
            .collect()
    }

    /// Uniform draw from the box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let coords = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| rng.random_range(lo..hi))
            .collect();
        ParamVector(coords)
    }

    /// Log volume, `Σ log(upper − lower)`.
    pub fn log_volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| (hi - lo).ln())
            .sum()
    }
}

/// A log density over parameter space.
///
/// Returns `NEG_INFINITY` exactly when `x` is outside [`support`](Self::support),
/// and a finite value otherwise.
pub trait LogDensity {
    fn log_density(&self, x: &[f64]) -> f64;
    fn support(&self) -> &BoxDomain;
}

/// Normalized uniform prior over a box: `−Σ log(upper−lower)` inside,
/// `−∞` outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformPrior {
    domain: BoxDomain,
    log_density_inside: f64,
}

impl UniformPrior {
    pub fn new(domain: BoxDomain) -> Self {
        let log_density_inside = -domain.log_volume();
        UniformPrior {
            domain,
            log_density_inside,
        }
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }
}

impl LogDensity for UniformPrior {
    fn log_density(&self, x: &[f64]) -> f64 {
        if self.domain.contains(x) {
            self.log_density_inside
        } else {
            f64::NEG_INFINITY
        }
    }

    fn support(&self) -> &BoxDomain {
        &self.domain
    }
}
