//! Gaussian-mixture density estimation for the evolving posterior
//! approximation: EM fitting with BIC component selection, log-pdf
//! evaluation, sampling, and Monte Carlo KL divergence between mixtures.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::ParamVector;
use crate::error::MixtureError;

const LN_2PI: f64 = 1.8378770664093453;

/// A batch of samples tagged with the loop iteration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    rows: Vec<ParamVector>,
    source_iteration: usize,
}

impl SampleBatch {
    pub fn new(rows: Vec<ParamVector>, source_iteration: usize) -> Self {
        SampleBatch {
            rows,
            source_iteration,
        }
    }

    pub fn rows(&self) -> &[ParamVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.dim())
    }

    pub fn source_iteration(&self) -> usize {
        self.source_iteration
    }
}

/// Weighted mixture of full-covariance multivariate normals.
///
/// Weights are normalized at construction; every covariance must admit a
/// Cholesky factorization. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureParts", into = "MixtureParts")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    chol: Vec<DMatrix<f64>>,
    /// Per-component `ln wⱼ − Σ ln Lⱼᵢᵢ − (d/2) ln 2π`.
    log_const: Vec<f64>,
}

/// Plain serialization mirror: weights, means, covariance rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureParts {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl From<GaussianMixture> for MixtureParts {
    fn from(g: GaussianMixture) -> Self {
        let d = g.dim();
        MixtureParts {
            weights: g.weights.clone(),
            means: g.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: g
                .covariances
                .iter()
                .map(|c| {
                    (0..d)
                        .map(|i| (0..d).map(|j| c[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<MixtureParts> for GaussianMixture {
    type Error = MixtureError;

    fn try_from(parts: MixtureParts) -> Result<Self, MixtureError> {
        let d = parts.means.first().map_or(0, |m| m.len());
        let means = parts
            .means
            .into_iter()
            .map(DVector::from_vec)
            .collect::<Vec<_>>();
        let covariances = parts
            .covariances
            .into_iter()
            .map(|rows| DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            .collect::<Vec<_>>();
        GaussianMixture::new(parts.weights, means, covariances)
    }
}

impl GaussianMixture {
    /// Builds a mixture, normalizing the weights and factorizing every
    /// covariance. Doubling all weights before construction is a no-op.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, MixtureError> {
        let c = weights.len();
        if c == 0 || means.len() != c || covariances.len() != c {
            return Err(MixtureError::DimensionMismatch {
                expected: c,
                got: means.len().min(covariances.len()),
            });
        }
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(MixtureError::InvalidWeights(sum));
        }
        let d = means[0].len();
        for m in &means {
            if m.len() != d {
                return Err(MixtureError::DimensionMismatch {
                    expected: d,
                    got: m.len(),
                });
            }
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let mut chol = Vec::with_capacity(c);
        let mut log_const = Vec::with_capacity(c);
        for (j, cov) in covariances.iter().enumerate() {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(MixtureError::DimensionMismatch {
                    expected: d,
                    got: cov.nrows(),
                });
            }
            let ch =
                Cholesky::new(cov.clone()).ok_or(MixtureError::SingularCovariance(j))?;
            let l = ch.l_dirty().lower_triangle();
            let log_det_half: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
            log_const.push(weights[j].max(f64::MIN_POSITIVE).ln() - log_det_half - 0.5 * d as f64 * LN_2PI);
            chol.push(l);
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariances,
            chol,
            log_const,
        })
    }

    /// Single standard normal component, handy for tests and fallbacks.
    pub fn standard_normal(d: usize) -> Self {
        GaussianMixture::new(vec![1.0], vec![DVector::zeros(d)], vec![DMatrix::identity(d, d)])
            .expect("identity covariance is positive definite")
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Overall mean `Σ wⱼ μⱼ`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m.iter().copied().collect()
    }

    /// Log density via log-sum-exp over components; finite for all finite x.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "mixture log_pdf dimension mismatch");
        let xv = DVector::from_column_slice(x);
        let mut terms = Vec::with_capacity(self.n_components());
        for j in 0..self.n_components() {
            if self.weights[j] == 0.0 {
                continue;
            }
            let diff = &xv - &self.means[j];
            let z = self.chol[j]
                .solve_lower_triangular(&diff)
                .expect("valid Cholesky factor");
            terms.push(self.log_const[j] - 0.5 * z.norm_squared());
        }
        log_sum_exp(&terms)
    }

    /// I.i.d. draws: component chosen by weight, then the usual
    /// `μ + L·z` transform.
    pub fn sample(&self, n: usize, seed: u64) -> SampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> SampleBatch {
        let d = self.dim();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let j = self.pick_component(rng);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &self.means[j] + &self.chol[j] * z;
            rows.push(
                ParamVector::new(x.iter().copied().collect())
                    .expect("finite mixture draw"),
            );
        }
        SampleBatch::new(rows, 0)
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        self.weights.len() - 1
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Monte Carlo KL divergence `∫ log(p/q) p` between two mixtures, estimated
/// with `n_mc` draws from `prev` and clamped at zero.
pub fn kl_between(
    prev: &GaussianMixture,
    curr: &GaussianMixture,
    n_mc: usize,
    seed: u64,
) -> f64 {
    assert_eq!(prev.dim(), curr.dim(), "mixture dimension mismatch");
    assert!(n_mc >= 10_000, "KL estimate needs at least 10^4 samples");
    let batch = prev.sample(n_mc, seed);
    let mut acc = 0.0;
    for x in batch.rows() {
        acc += prev.log_pdf(x) - curr.log_pdf(x);
    }
    (acc / n_mc as f64).max(0.0)
}

/// Fits a mixture to samples: EM at every component count in
/// `1..=max_components` (three k-means-seeded restarts each) and BIC to pick
/// the order. Covariances get `1e-6·tr(Σ_sample)/d · I` added every M-step.
pub fn fit_gmm(
    samples: &SampleBatch,
    max_components: usize,
    seed: u64,
) -> Result<GaussianMixture, MixtureError> {
    let m = samples.len();
    let d = samples.dim();
    let max_components = max_components.max(1);
    let needed = (10 * d * max_components).max(1);
    if m < needed {
        return Err(MixtureError::TooFewSamples {
            needed,
            got: m,
            dim: d,
            max_components,
        });
    }
    let data: Vec<DVector<f64>> = samples
        .rows()
        .iter()
        .map(|r| DVector::from_column_slice(r))
        .collect();
    let reg = regularization(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<(f64, EmFit)> = None;
    for c in 1..=max_components {
        let restarts = if c == 1 { 1 } else { 3 };
        let mut best_for_c: Option<EmFit> = None;
        for _ in 0..restarts {
            let restart_seed = rng.random::<u64>();
            match em_fit(&data, c, reg, restart_seed) {
                Ok(fit) => {
                    if best_for_c
                        .as_ref()
                        .is_none_or(|b| fit.log_likelihood > b.log_likelihood)
                    {
                        best_for_c = Some(fit);
                    }
                }
                Err(EmCollapse) => {}
            }
        }
        if let Some(fit) = best_for_c {
            let params = (c - 1) + c * d + c * d * (d + 1) / 2;
            let bic = -2.0 * fit.log_likelihood + params as f64 * (m as f64).ln();
            if best.as_ref().is_none_or(|(b, _)| bic < *b) {
                best = Some((bic, fit));
            }
        }
    }
    let (_, fit) = best.ok_or(MixtureError::EmptyComponentCollapse)?;
    GaussianMixture::new(fit.weights, fit.means, fit.covariances)
}

fn regularization(data: &[DVector<f64>]) -> f64 {
    let m = data.len() as f64;
    let d = data[0].len();
    let mean = data.iter().fold(DVector::zeros(d), |a, x| a + x) / m;
    let trace: f64 = (0..d)
        .map(|j| data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / m)
        .sum();
    1e-6 * trace / d as f64
}

struct EmFit {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    log_likelihood: f64,
    /// Mean log-likelihood after each EM iteration (non-decreasing).
    #[allow(dead_code)]
    ll_trace: Vec<f64>,
}

struct EmCollapse;

const EM_MAX_ITERS: usize = 500;
const EM_TOL: f64 = 1e-8;

fn em_fit(
    data: &[DVector<f64>],
    c: usize,
    reg: f64,
    seed: u64,
) -> Result<EmFit, EmCollapse> {
    let m = data.len();
    let d = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut means = kmeans_init(data, c, &mut rng);
    let mut weights = vec![1.0 / c as f64; c];
    let mut covariances = initial_covariances(data, &means, reg);

    let mut resp = vec![0.0f64; m * c];
    let mut slots = vec![0.0f64; c];
    let mut prev_mean_ll = f64::NEG_INFINITY;
    let mut ll_trace = Vec::new();

    for _ in 0..EM_MAX_ITERS {
        // E-step.
        let comps: Vec<(DMatrix<f64>, f64)> = covariances
            .iter()
            .map(|cov| {
                let ch = Cholesky::new(cov.clone()).ok_or(EmCollapse)?;
                let l = ch.l_dirty().lower_triangle();
                let log_det_half: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
                Ok((l, -log_det_half - 0.5 * d as f64 * LN_2PI))
            })
            .collect::<Result<_, EmCollapse>>()?;
        let mut total_ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            for j in 0..c {
                let diff = x - &means[j];
                let z = comps[j]
                    .0
                    .solve_lower_triangular(&diff)
                    .ok_or(EmCollapse)?;
                slots[j] = weights[j].max(f64::MIN_POSITIVE).ln() + comps[j].1
                    - 0.5 * z.norm_squared();
            }
            let lse = log_sum_exp(&slots);
            total_ll += lse;
            for j in 0..c {
                resp[i * c + j] = (slots[j] - lse).exp();
            }
        }
        let mean_ll = total_ll / m as f64;
        ll_trace.push(mean_ll);
        if (mean_ll - prev_mean_ll).abs() < EM_TOL {
            break;
        }
        prev_mean_ll = mean_ll;

        // M-step.
        for j in 0..c {
            let nk: f64 = (0..m).map(|i| resp[i * c + j]).sum();
            if nk < (d + 1) as f64 * 1e-3 {
                return Err(EmCollapse);
            }
            weights[j] = nk / m as f64;
            let mut mu = DVector::zeros(d);
            for (i, x) in data.iter().enumerate() {
                mu += x * resp[i * c + j];
            }
            mu /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for (i, x) in data.iter().enumerate() {
                let diff = x - &mu;
                cov.ger(resp[i * c + j], &diff, &diff, 1.0);
            }
            cov /= nk;
            for k in 0..d {
                cov[(k, k)] += reg;
            }
            means[j] = mu;
            covariances[j] = cov;
        }
    }

    let log_likelihood = *ll_trace.last().unwrap_or(&f64::NEG_INFINITY) * m as f64;
    Ok(EmFit {
        weights,
        means,
        covariances,
        log_likelihood,
        ll_trace,
    })
}

/// k-means++ seeding plus a few Lloyd iterations on per-dimension whitened
/// coordinates (the raw scales can differ by orders of magnitude).
fn kmeans_init<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    c: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let m = data.len();
    let d = data[0].len();
    let mean = data.iter().fold(DVector::zeros(d), |a, x| a + x) / m as f64;
    let mut scale = DVector::zeros(d);
    for j in 0..d {
        let var = data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / m as f64;
        scale[j] = var.sqrt().max(1e-300);
    }
    let white: Vec<DVector<f64>> = data
        .iter()
        .map(|x| DVector::from_fn(d, |j, _| (x[j] - mean[j]) / scale[j]))
        .collect();

    // k-means++ seeding.
    let mut centers = vec![white[rng.random_range(0..m)].clone()];
    let mut dist2: Vec<f64> = white
        .iter()
        .map(|x| (x - &centers[0]).norm_squared())
        .collect();
    while centers.len() < c {
        let total: f64 = dist2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in dist2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        let next = white[idx].clone();
        for (i, x) in white.iter().enumerate() {
            dist2[i] = dist2[i].min((x - &next).norm_squared());
        }
        centers.push(next);
    }

    // Lloyd iterations.
    let mut assign = vec![0usize; m];
    for _ in 0..20 {
        let mut moved = false;
        for (i, x) in white.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, ctr) in centers.iter().enumerate() {
                let dd = (x - ctr).norm_squared();
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                moved = true;
            }
        }
        for (j, center) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = white
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(x, _)| x)
                .collect();
            if !members.is_empty() {
                *center = members.iter().fold(DVector::zeros(d), |a, x| a + *x)
                    / members.len() as f64;
            }
        }
        if !moved {
            break;
        }
    }

    centers
        .into_iter()
        .map(|ctr| DVector::from_fn(d, |j, _| mean[j] + ctr[j] * scale[j]))
        .collect()
}

fn initial_covariances(
    data: &[DVector<f64>],
    means: &[DVector<f64>],
    reg: f64,
) -> Vec<DMatrix<f64>> {
    let m = data.len() as f64;
    let d = data[0].len();
    let overall_mean = data.iter().fold(DVector::zeros(d), |a, x| a + x) / m;
    let mut cov = DMatrix::zeros(d, d);
    for x in data {
        let diff = x - &overall_mean;
        cov.ger(1.0 / m, &diff, &diff, 1.0);
    }
    for k in 0..d {
        cov[(k, k)] += reg.max(1e-12 * cov[(k, k)].abs());
    }
    vec![cov; means.len()]
}
