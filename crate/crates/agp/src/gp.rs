//! Gaussian-process regression for the log-residual surrogate.
//!
//! The kernel is squared-exponential with per-dimension lengthscales (ARD).
//! Inputs are standardized to the unit box through the problem's
//! [`BoxDomain`] before any kernel evaluation, so lengthscales and their
//! search bounds live on the standardized scale. Targets are centered by
//! their mean (the constant prior mean of the process); signal-variance
//! bounds and the nugget floor scale with the target variance.
//!
//! Hyperparameters are chosen by maximizing the log marginal likelihood
//! with a bounded multi-start pattern search over log-parameters. The
//! nugget is not optimized: it starts at a floor and is escalated tenfold
//! on factorization failure, up to a cap.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BoxDomain, ParamVector};
use crate::error::GpError;

const LN_2PI: f64 = 1.8378770664093453;

/// Kernel hyperparameters on standardized input coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Per-dimension lengthscales, strictly positive.
    pub lengthscales: Vec<f64>,
    /// Kernel value at zero distance, strictly positive.
    pub signal_variance: f64,
    /// Diagonal jitter added to the Gram matrix, non-negative.
    pub nugget: f64,
}

impl KernelParams {
    pub fn validate(&self, dim: usize) -> Result<(), GpError> {
        if self.lengthscales.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                got: self.lengthscales.len(),
            });
        }
        let ok = self.lengthscales.iter().all(|&l| l > 0.0 && l.is_finite())
            && self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && self.nugget >= 0.0
            && self.nugget.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GpError::FactorizationFailure { nugget: self.nugget })
        }
    }
}

/// Squared-exponential ARD kernel value `sv · exp(−½ Σ ((xᵢ−x′ᵢ)/ℓᵢ)²)`.
pub fn kernel_eval(params: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64, GpError> {
    if x.len() != x2.len() || x.len() != params.lengthscales.len() {
        return Err(GpError::DimensionMismatch {
            expected: params.lengthscales.len(),
            got: x.len().max(x2.len()),
        });
    }
    Ok(kernel_unchecked(params, x, x2))
}

#[inline]
fn kernel_unchecked(params: &KernelParams, x: &[f64], x2: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&a, &b), &l) in x.iter().zip(x2).zip(&params.lengthscales) {
        let z = (a - b) / l;
        s += z * z;
    }
    params.signal_variance * (-0.5 * s).exp()
}

/// Settings for hyperparameter estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpSettings {
    /// Multi-start count for a full fit.
    pub n_starts: usize,
    /// Start count for warm-started refits inside batch selection
    /// (the warm start itself plus `refit_starts − 1` fresh ones).
    pub refit_starts: usize,
    /// Pattern-search sweep budget per start.
    pub max_opt_iters: usize,
    /// Sweep budget per start for warm-started refits.
    pub refit_max_opt_iters: usize,
    /// Lengthscale search bounds on the standardized input scale.
    pub lengthscale_bounds: (f64, f64),
    /// Signal-variance bounds as multiples of the target variance.
    pub signal_variance_rel_bounds: (f64, f64),
    /// Nugget floor as a multiple of the target variance.
    pub nugget_rel_floor: f64,
    /// Nugget cap for the tenfold escalation ladder.
    pub nugget_rel_max: f64,
}

impl Default for GpSettings {
    fn default() -> Self {
        GpSettings {
            n_starts: 8,
            refit_starts: 2,
            max_opt_iters: 200,
            refit_max_opt_iters: 60,
            lengthscale_bounds: (1e-2, 10.0),
            signal_variance_rel_bounds: (1e-4, 1e4),
            nugget_rel_floor: 1e-8,
            nugget_rel_max: 1e-2,
        }
    }
}

/// Posterior mean and variance of the process at a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPrediction {
    pub mean: f64,
    /// Non-negative; clamped at zero after floating-point cancellation.
    pub variance: f64,
}

/// A trained Gaussian process.
///
/// Immutable after [`fit`]; prediction is pure and safe to call from many
/// threads.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelParams,
    mean_const: f64,
    domain: BoxDomain,
    train_x: Vec<ParamVector>,
    train_y: Vec<f64>,
    x_std: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal: f64,
}

impl GpModel {
    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn mean_const(&self) -> f64 {
        self.mean_const
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn train_x(&self) -> &[ParamVector] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn n_points(&self) -> usize {
        self.train_y.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Log marginal likelihood of the training data under this model.
    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    /// Posterior mean and variance at `x` (raw coordinates).
    ///
    /// Panics on dimension mismatch.
    pub fn predict(&self, x: &[f64]) -> GpPrediction {
        let k_vec = self.k_vector(x);
        let mean = self.mean_const + k_vec.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_vec)
            .expect("triangular solve on a valid Cholesky factor");
        let variance = (self.kernel.signal_variance - v.norm_squared()).max(0.0);
        GpPrediction { mean, variance }
    }

    /// Posterior mean only; O(n·d) instead of O(n²).
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let k_vec = self.k_vector(x);
        self.mean_const + k_vec.dot(&self.alpha)
    }

    fn k_vector(&self, x: &[f64]) -> DVector<f64> {
        assert_eq!(x.len(), self.dim(), "prediction point dimension mismatch");
        let u = self.domain.standardize(x);
        DVector::from_fn(self.x_std.nrows(), |i, _| {
            let mut s = 0.0;
            for (j, &uj) in u.iter().enumerate() {
                let z = (self.x_std[(i, j)] - uj) / self.kernel.lengthscales[j];
                s += z * z;
            }
            self.kernel.signal_variance * (-0.5 * s).exp()
        })
    }

    /// Squared standardized distance from `x` to the nearest training point.
    pub fn min_sq_distance_std(&self, x: &[f64]) -> f64 {
        let u = self.domain.standardize(x);
        let mut best = f64::INFINITY;
        for i in 0..self.x_std.nrows() {
            let mut s = 0.0;
            for j in 0..u.len() {
                let z = self.x_std[(i, j)] - u[j];
                s += z * z;
            }
            best = best.min(s);
        }
        best
    }
}

fn standardized_matrix(
    train_x: &[ParamVector],
    domain: &BoxDomain,
) -> Result<DMatrix<f64>, GpError> {
    let d = domain.dim();
    for x in train_x {
        if x.dim() != d {
            return Err(GpError::DimensionMismatch {
                expected: d,
                got: x.dim(),
            });
        }
    }
    let n = train_x.len();
    let mut m = DMatrix::zeros(n, d);
    for (i, x) in train_x.iter().enumerate() {
        for (j, &u) in domain.standardize(x).iter().enumerate() {
            m[(i, j)] = u;
        }
    }
    Ok(m)
}

/// Factorizes a Gram matrix, rejecting factors whose pivots fall below a
/// relative tolerance; a formally positive but numerically rank-deficient
/// matrix (duplicate design points with a vanishing nugget) must count as a
/// failure rather than yield garbage solves.
fn checked_cholesky(k: DMatrix<f64>, scale: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    let chol = Cholesky::new(k)?;
    let tol = 1e-13 * scale;
    for i in 0..n {
        let pivot = chol.l_dirty()[(i, i)];
        if !(pivot * pivot >= tol) {
            return None;
        }
    }
    Some(chol)
}

fn gram(params: &KernelParams, x_std: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x_std.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance + params.nugget;
        for j in 0..i {
            let mut s = 0.0;
            for c in 0..x_std.ncols() {
                let z = (x_std[(i, c)] - x_std[(j, c)]) / params.lengthscales[c];
                s += z * z;
            }
            let v = params.signal_variance * (-0.5 * s).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Log marginal likelihood of zero-mean targets `y` at standardized inputs:
/// `−½ yᵀ(K+ηI)⁻¹y − ½ log det(K+ηI) − (n/2) log 2π`.
pub fn log_marginal_likelihood(
    params: &KernelParams,
    x_std: &DMatrix<f64>,
    y_centered: &DVector<f64>,
) -> Result<f64, GpError> {
    params.validate(x_std.ncols())?;
    let k = gram(params, x_std);
    let scale = params.signal_variance + params.nugget;
    let chol = checked_cholesky(k, scale).ok_or(GpError::FactorizationFailure {
        nugget: params.nugget,
    })?;
    let alpha = chol.solve(y_centered);
    let log_det_half: f64 = (0..x_std.nrows())
        .map(|i| chol.l_dirty()[(i, i)].ln())
        .sum();
    let n = x_std.nrows() as f64;
    Ok(-0.5 * y_centered.dot(&alpha) - log_det_half - 0.5 * n * LN_2PI)
}

/// Builds a model with fixed hyperparameters (no optimization).
pub fn fit_with_params(
    train_x: &[ParamVector],
    train_y: &[f64],
    domain: &BoxDomain,
    kernel: KernelParams,
) -> Result<GpModel, GpError> {
    kernel.validate(domain.dim())?;
    if train_y.iter().any(|y| !y.is_finite()) {
        let idx = train_y.iter().position(|y| !y.is_finite()).unwrap();
        return Err(GpError::NonFiniteTarget(idx));
    }
    if train_x.len() != train_y.len() || train_x.is_empty() {
        return Err(GpError::TooFewPoints(train_x.len().min(train_y.len())));
    }
    let x_std = standardized_matrix(train_x, domain)?;
    let mean_const = train_y.iter().sum::<f64>() / train_y.len() as f64;
    let yc = DVector::from_iterator(train_y.len(), train_y.iter().map(|&y| y - mean_const));
    let k = gram(&kernel, &x_std);
    let scale = kernel.signal_variance + kernel.nugget;
    let chol = checked_cholesky(k, scale).ok_or(GpError::FactorizationFailure {
        nugget: kernel.nugget,
    })?;
    let alpha = chol.solve(&yc);
    let log_det_half: f64 = (0..train_y.len())
        .map(|i| chol.l_dirty()[(i, i)].ln())
        .sum();
    let n = train_y.len() as f64;
    let log_marginal = -0.5 * yc.dot(&alpha) - log_det_half - 0.5 * n * LN_2PI;
    Ok(GpModel {
        kernel,
        mean_const,
        domain: domain.clone(),
        train_x: train_x.to_vec(),
        train_y: train_y.to_vec(),
        x_std,
        chol,
        alpha,
        log_marginal,
    })
}

/// Trains a GP by multi-start marginal-likelihood maximization.
///
/// `warm` seeds the first start (the remaining starts are drawn uniformly in
/// log-space from the search bounds). `n_starts`/`max_iters` select between
/// the full-fit and refit budgets in `settings`. Deterministic given data,
/// settings and the RNG state; ties between starts resolve to the lowest
/// start index.
pub fn fit<R: Rng + ?Sized>(
    train_x: &[ParamVector],
    train_y: &[f64],
    domain: &BoxDomain,
    settings: &GpSettings,
    warm: Option<&KernelParams>,
    n_starts: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<GpModel, GpError> {
    if train_x.len() < 2 {
        return Err(GpError::TooFewPoints(train_x.len()));
    }
    if let Some(idx) = train_y.iter().position(|y| !y.is_finite()) {
        return Err(GpError::NonFiniteTarget(idx));
    }
    let d = domain.dim();
    let x_std = standardized_matrix(train_x, domain)?;
    let n = train_y.len();
    let mean_const = train_y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, train_y.iter().map(|&y| y - mean_const));
    let var_y = yc.norm_squared() / n as f64;
    // Degenerate targets (all equal) still need a usable scale.
    let var_scale = if var_y > 1e-12 { var_y } else { 1.0 };

    let (ls_lo, ls_hi) = settings.lengthscale_bounds;
    let sv_lo = settings.signal_variance_rel_bounds.0 * var_scale;
    let sv_hi = settings.signal_variance_rel_bounds.1 * var_scale;
    let lo: Vec<f64> = (0..d)
        .map(|_| ls_lo.ln())
        .chain(std::iter::once(sv_lo.ln()))
        .collect();
    let hi: Vec<f64> = (0..d)
        .map(|_| ls_hi.ln())
        .chain(std::iter::once(sv_hi.ln()))
        .collect();

    // Start list is drawn once so every rung of the nugget ladder sees the
    // same candidates.
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(n_starts.max(1));
    let default_start: Vec<f64> = (0..d)
        .map(|_| 0.5 * (ls_lo.ln() + ls_hi.ln()))
        .chain(std::iter::once(var_scale.ln()))
        .collect();
    match warm {
        Some(p) if p.lengthscales.len() == d => {
            let mut s: Vec<f64> = p.lengthscales.iter().map(|l| l.ln()).collect();
            s.push(p.signal_variance.ln());
            starts.push(clamp_into(&s, &lo, &hi));
        }
        _ => starts.push(clamp_into(&default_start, &lo, &hi)),
    }
    while starts.len() < n_starts.max(1) {
        let s: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&a, &b)| rng.random_range(a..b))
            .collect();
        starts.push(s);
    }

    let mut nugget = settings.nugget_rel_floor * var_scale;
    let nugget_max = settings.nugget_rel_max * var_scale;
    loop {
        let objective = |theta: &[f64]| -> f64 {
            let params = theta_to_params(theta, d, nugget);
            log_marginal_likelihood(&params, &x_std, &yc).unwrap_or(f64::NEG_INFINITY)
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in &starts {
            let (theta, value) = pattern_search(&objective, start.clone(), &lo, &hi, max_iters);
            if value.is_finite() && best.as_ref().is_none_or(|(b, _)| value > *b) {
                best = Some((value, theta));
            }
        }
        if let Some((_, theta)) = best {
            let params = theta_to_params(&theta, d, nugget);
            return fit_with_params(train_x, train_y, domain, params);
        }
        // Factorization failed at every start: escalate the nugget.
        nugget *= 10.0;
        if nugget > nugget_max * (1.0 + 1e-12) {
            return Err(GpError::FactorizationFailure { nugget });
        }
    }
}

fn theta_to_params(theta: &[f64], d: usize, nugget: f64) -> KernelParams {
    KernelParams {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        nugget,
    }
}

fn clamp_into(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&a, &b))| v.clamp(a, b))
        .collect()
}

/// Greedy coordinate pattern search: move to the best improving axis
/// candidate, halve the step when none improves. Never leaves the bounds
/// and never accepts a worse value, so the result dominates the start.
fn pattern_search(
    objective: &impl Fn(&[f64]) -> f64,
    start: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    max_sweeps: usize,
) -> (Vec<f64>, f64) {
    let mut x = clamp_into(&start, lo, hi);
    let mut fx = objective(&x);
    let mut step = 0.5;
    for _ in 0..max_sweeps {
        if step < 1e-3 {
            break;
        }
        let mut best_candidate: Option<(f64, Vec<f64>)> = None;
        for i in 0..x.len() {
            for sign in [-1.0, 1.0] {
                let mut cand = x.clone();
                cand[i] = (cand[i] + sign * step).clamp(lo[i], hi[i]);
                if cand[i] == x[i] {
                    continue;
                }
                let fc = objective(&cand);
                if fc > fx && best_candidate.as_ref().is_none_or(|(b, _)| fc > *b) {
                    best_candidate = Some((fc, cand));
                }
            }
        }
        match best_candidate {
            Some((fc, cand)) => {
                x = cand;
                fx = fc;
            }
            None => step *= 0.5,
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box(d: usize) -> BoxDomain {
        BoxDomain::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    fn pv(coords: &[f64]) -> ParamVector {
        ParamVector::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn kernel_closed_form_values() {
        let p = KernelParams {
            lengthscales: vec![1.0],
            signal_variance: 1.0,
            nugget: 0.0,
        };
        let k0 = kernel_eval(&p, &[0.3], &[0.3]).unwrap();
        assert!((k0 - 1.0).abs() < 1e-15);
        let k1 = kernel_eval(&p, &[0.0], &[1.0]).unwrap();
        assert!((k1 - (-0.5f64).exp()).abs() < 1e-12);
        // Decay towards zero at long range.
        let kfar = kernel_eval(&p, &[0.0], &[50.0]).unwrap();
        assert!(kfar < 1e-300);
        assert!(kernel_eval(&p, &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn kernel_gram_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KernelParams {
            lengthscales: vec![0.4, 1.7],
            signal_variance: 2.5,
            nugget: 0.0,
        };
        for _ in 0..50 {
            let a = [rng.random::<f64>(), rng.random::<f64>()];
            let b = [rng.random::<f64>(), rng.random::<f64>()];
            let kab = kernel_eval(&p, &a, &b).unwrap();
            let kba = kernel_eval(&p, &b, &a).unwrap();
            assert_eq!(kab, kba);
            assert!(kab <= p.signal_variance);
        }
    }

    /// Dense-inverse route for the posterior equations, independent of the
    /// Cholesky path used by `GpModel::predict`.
    fn dense_predict(
        params: &KernelParams,
        domain: &BoxDomain,
        xs: &[ParamVector],
        ys: &[f64],
        x: &[f64],
    ) -> (f64, f64) {
        let n = xs.len();
        let mean_const = ys.iter().sum::<f64>() / n as f64;
        let std: Vec<Vec<f64>> = xs.iter().map(|p| domain.standardize(p)).collect();
        let u = domain.standardize(x);
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = kernel_eval(params, &std[i], &std[j]).unwrap()
                    + if i == j { params.nugget } else { 0.0 };
            }
        }
        let k_inv = k.try_inverse().expect("dense inverse");
        let k_vec = DVector::from_fn(n, |i, _| kernel_eval(params, &std[i], &u).unwrap());
        let yc = DVector::from_fn(n, |i, _| ys[i] - mean_const);
        let mean = mean_const + k_vec.dot(&(&k_inv * &yc));
        let var = kernel_eval(params, &u, &u).unwrap() - k_vec.dot(&(&k_inv * &k_vec));
        (mean, var)
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let domain = BoxDomain::new(vec![-2.0, 1.0], vec![3.0, 4.0]).unwrap();
        for _ in 0..20 {
            let params = KernelParams {
                lengthscales: vec![rng.random_range(0.1..0.8), rng.random_range(0.1..0.8)],
                signal_variance: rng.random_range(0.5..4.0),
                nugget: 1e-6,
            };
            let xs: Vec<ParamVector> = (0..3).map(|_| domain.sample_uniform(&mut rng)).collect();
            let ys: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let model = fit_with_params(&xs, &ys, &domain, params.clone()).unwrap();
            let x = domain.sample_uniform(&mut rng);
            let fast = model.predict(&x);
            let (mean, var) = dense_predict(&params, &domain, &xs, &ys, &x);
            assert!((fast.mean - mean).abs() < 1e-10, "mean mismatch");
            assert!((fast.variance - var.max(0.0)).abs() < 1e-10, "var mismatch");
        }
    }

    #[test]
    fn interpolates_training_points_without_nugget() {
        let domain = unit_box(1);
        let xs = vec![pv(&[0.1]), pv(&[0.5]), pv(&[0.9])];
        let ys = vec![1.0, -0.5, 2.0];
        let params = KernelParams {
            lengthscales: vec![0.4],
            signal_variance: 1.5,
            nugget: 0.0,
        };
        let model = fit_with_params(&xs, &ys, &domain, params).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            let p = model.predict(x);
            assert!((p.mean - y).abs() < 1e-8);
            assert!(p.variance.abs() < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let domain = BoxDomain::new(vec![-100.0], vec![100.0]).unwrap();
        let xs = vec![pv(&[-99.0]), pv(&[-98.0])];
        let ys = vec![3.0, 5.0];
        let params = KernelParams {
            lengthscales: vec![1e-2],
            signal_variance: 2.0,
            nugget: 1e-8,
        };
        let model = fit_with_params(&xs, &ys, &domain, params).unwrap();
        let p = model.predict(&[99.0]);
        assert!((p.mean - 4.0).abs() < 1e-9, "mean reverts to target average");
        assert!((p.variance - 2.0).abs() < 1e-9, "variance reverts to signal");
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let domain = unit_box(1);
        let xs = vec![pv(&[0.2]), pv(&[0.8])];
        let ys = vec![0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = fit(
            &xs,
            &ys,
            &domain,
            &GpSettings::default(),
            None,
            4,
            100,
            &mut rng,
        )
        .unwrap();
        for x in [0.3, 0.5, 0.65] {
            assert!(model.predict(&[x]).mean.abs() < 1e-12);
        }
    }

    #[test]
    fn log_marginal_scalar_case() {
        // One point, y = 0, k(x,x)+nugget = 1 → −½ log 2π.
        let params = KernelParams {
            lengthscales: vec![1.0],
            signal_variance: 0.75,
            nugget: 0.25,
        };
        let x_std = DMatrix::from_row_slice(1, 1, &[0.5]);
        let y = DVector::from_column_slice(&[0.0]);
        let lml = log_marginal_likelihood(&params, &x_std, &y).unwrap();
        assert!((lml - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn log_marginal_matches_dense_gaussian_density() {
        // Brute-force multivariate normal log-density via determinant and
        // inverse on 4-point sets.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let domain = unit_box(2);
        for _ in 0..25 {
            let params = KernelParams {
                lengthscales: vec![rng.random_range(0.2..0.7), rng.random_range(0.2..0.7)],
                signal_variance: rng.random_range(0.5..3.0),
                nugget: rng.random_range(1e-4..1e-2),
            };
            let n = 4;
            let x_std = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let fast = log_marginal_likelihood(&params, &x_std, &y).unwrap();

            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let a = [x_std[(i, 0)], x_std[(i, 1)]];
                    let b = [x_std[(j, 0)], x_std[(j, 1)]];
                    k[(i, j)] = kernel_eval(&params, &a, &b).unwrap()
                        + if i == j { params.nugget } else { 0.0 };
                }
            }
            let det = k.determinant();
            let k_inv = k.try_inverse().unwrap();
            let dense =
                -0.5 * y.dot(&(&k_inv * &y)) - 0.5 * det.ln() - 0.5 * (n as f64) * LN_2PI;
            assert!((fast - dense).abs() < 1e-10);
        }
    }

    #[test]
    fn lml_decreases_as_nugget_grows_on_interpolable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_std = DMatrix::from_fn(6, 1, |_, _| rng.random::<f64>());
        // Smooth exactly-interpolable targets.
        let y = DVector::from_fn(6, |i, _| (3.0 * x_std[(i, 0)]).sin());
        let mut prev = f64::INFINITY;
        for nugget in [1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
            let params = KernelParams {
                lengthscales: vec![0.5],
                signal_variance: 1.0,
                nugget,
            };
            let lml = log_marginal_likelihood(&params, &x_std, &y).unwrap();
            assert!(lml < prev, "LML should fall as the nugget grows");
            prev = lml;
        }
    }

    #[test]
    fn fit_dominates_its_starting_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let domain = unit_box(1);
        let xs: Vec<ParamVector> = (0..8).map(|_| domain.sample_uniform(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (6.0 * x[0]).sin()).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let x_std = standardized_matrix(&xs, &domain).unwrap();
        let yc = DVector::from_iterator(ys.len(), ys.iter().map(|&y| y - mean));
        for seed in 0..5 {
            let warm = KernelParams {
                lengthscales: vec![0.05 + 0.3 * seed as f64],
                signal_variance: 0.3 + seed as f64,
                nugget: 0.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = fit(
                &xs,
                &ys,
                &domain,
                &GpSettings::default(),
                Some(&warm),
                1,
                200,
                &mut rng,
            )
            .unwrap();
            let at_start = log_marginal_likelihood(
                &KernelParams {
                    nugget: model.kernel().nugget,
                    ..warm.clone()
                },
                &x_std,
                &yc,
            )
            .unwrap();
            assert!(model.log_marginal() >= at_start - 1e-9);
        }
    }

    #[test]
    fn fit_recovers_lengthscale_within_factor_three() {
        // Draw a function from the prior with known hyperparameters, fit,
        // and compare. Statistical oracle with a loose bound.
        let domain = unit_box(1);
        let truth = KernelParams {
            lengthscales: vec![0.2],
            signal_variance: 1.0,
            nugget: 1e-8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 12;
        let xs: Vec<ParamVector> = (0..n)
            .map(|i| pv(&[(i as f64 + 0.5) / n as f64]))
            .collect();
        let x_std = standardized_matrix(&xs, &domain).unwrap();
        let k = gram(&truth, &x_std);
        let chol = Cholesky::new(k).unwrap();
        let z = DVector::from_fn(n, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let ys: Vec<f64> = (chol.l_dirty().lower_triangle() * z).iter().copied().collect();
        let model = fit(
            &xs,
            &ys,
            &domain,
            &GpSettings::default(),
            None,
            8,
            200,
            &mut rng,
        )
        .unwrap();
        let l = model.kernel().lengthscales[0];
        assert!(
            l > 0.2 / 3.0 && l < 0.2 * 3.0,
            "lengthscale {l} should be within a factor 3 of 0.2"
        );
    }

    #[test]
    fn fit_is_deterministic_for_a_seed() {
        let domain = unit_box(2);
        let mut data_rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<ParamVector> = (0..10)
            .map(|_| domain.sample_uniform(&mut data_rng))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| (4.0 * x[0]).cos() + x[1]).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fit(
                &xs,
                &ys,
                &domain,
                &GpSettings::default(),
                None,
                8,
                200,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.kernel(), b.kernel());
        assert_eq!(a.log_marginal(), b.log_marginal());
    }

    #[test]
    fn adding_a_point_never_raises_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let domain = unit_box(2);
        for _ in 0..20 {
            let params = KernelParams {
                lengthscales: vec![rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)],
                signal_variance: rng.random_range(0.5..2.0),
                nugget: 1e-8,
            };
            let n = rng.random_range(3..10usize);
            let xs: Vec<ParamVector> = (0..n).map(|_| domain.sample_uniform(&mut rng)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let small = fit_with_params(&xs, &ys, &domain, params.clone()).unwrap();
            let mut xs2 = xs.clone();
            let mut ys2 = ys.clone();
            xs2.push(domain.sample_uniform(&mut rng));
            ys2.push(rng.random_range(-1.0..1.0));
            let large = fit_with_params(&xs2, &ys2, &domain, params).unwrap();
            for _ in 0..10 {
                let x = domain.sample_uniform(&mut rng);
                let v_small = small.predict(&x).variance;
                let v_large = large.predict(&x).variance;
                assert!(v_large <= v_small + 1e-9);
            }
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let domain = unit_box(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = fit(
            &[pv(&[0.5])],
            &[1.0],
            &domain,
            &GpSettings::default(),
            None,
            2,
            50,
            &mut rng,
        );
        assert!(matches!(err, Err(GpError::TooFewPoints(1))));
    }

    #[test]
    fn duplicate_points_fail_after_nugget_escalation() {
        let domain = unit_box(1);
        let xs = vec![pv(&[0.5]), pv(&[0.5]), pv(&[0.5])];
        let ys = vec![0.0, 1.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let settings = GpSettings {
            nugget_rel_floor: 1e-18,
            nugget_rel_max: 1e-17,
            ..GpSettings::default()
        };
        let err = fit(&xs, &ys, &domain, &settings, None, 2, 50, &mut rng);
        assert!(matches!(err, Err(GpError::FactorizationFailure { .. })));
    }
}
