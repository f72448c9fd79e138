//! Gaussian sampling, random covariance generation, multivariate-normal
//! orthant probabilities and truncated-orthant means.
//!
//! Orthant probabilities use the separation-of-variables transform: the
//! integration variables are reordered, the covariance is Cholesky-factored
//! and the integral becomes an expectation over the unit hypercube, which is
//! estimated by (optionally quasi-) Monte Carlo over a fixed number of
//! independent batches. Batch `b` always draws from stream `b` of the budget
//! seed, so the estimate is identical for any thread count.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_lower, normal_cdf, normal_quantile, psd_factor, CMatrix, CVector, HermitianPsd, RMatrix,
    HERMITIAN_TOL,
};
use crate::rng::{derive_seed, stream_rng, StreamRng};

/// Number of independent batches behind every orthant-probability estimate.
pub const BATCHES: usize = 16;
/// Smallest accepted [`IntegrationBudget::sample_count`].
pub const MIN_SAMPLES: usize = 1000;

/// The sign pattern selecting one orthant of real space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OrthantSpec {
    signs: Vec<i8>,
}

impl OrthantSpec {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument(format!("orthant sign {bad}")));
        }
        Ok(Self { signs })
    }

    pub fn positive(dim: usize) -> Self {
        Self { signs: vec![1; dim] }
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// The orthant with coordinate `index` removed.
    pub fn without(&self, index: usize) -> Self {
        let mut signs = self.signs.clone();
        signs.remove(index);
        Self { signs }
    }

    /// All `2^dim` orthants, in binary counting order.
    pub fn all(dim: usize) -> impl Iterator<Item = OrthantSpec> {
        (0..1u64 << dim).map(move |bits| OrthantSpec {
            signs: (0..dim).map(|k| if bits >> k & 1 == 1 { -1 } else { 1 }).collect(),
        })
    }
}

/// Sample count and seed for a Monte-Carlo integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegrationBudget {
    pub sample_count: usize,
    pub seed: u64,
    /// Use a randomly shifted Kronecker lattice instead of i.i.d. points.
    pub quasi: bool,
}

impl IntegrationBudget {
    pub fn new(sample_count: usize, seed: u64) -> Result<Self> {
        if sample_count < MIN_SAMPLES {
            return Err(Error::InvalidBudget(format!("sample_count {sample_count} < {MIN_SAMPLES}")));
        }
        Ok(Self { sample_count, seed, quasi: false })
    }

    pub fn quasi(self, quasi: bool) -> Self {
        Self { quasi, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Samples per batch; the total actually used is `BATCHES` times this.
    pub fn per_batch(&self) -> usize {
        self.sample_count.div_ceil(BATCHES)
    }
}

impl Default for IntegrationBudget {
    fn default() -> Self {
        Self { sample_count: 20_000, seed: 0, quasi: false }
    }
}

/// A probability estimate with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbEstimate {
    pub value: f64,
    pub stderr: f64,
}

impl ProbEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }
}

/// Circularly symmetric standard complex normal draw, `E|z|² = 1`.
pub fn standard_complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `L z` with `z` a vector of standard complex normals.
pub fn sample_with_factor<R: Rng + ?Sized>(factor: &CMatrix, rng: &mut R) -> CVector {
    let z = CVector::from_fn(factor.ncols(), |_, _| standard_complex_normal(rng));
    factor * z
}

/// `count` draws from `N_C(0, cov)`; draw `i` uses stream `i` of `seed`.
pub fn sample_complex_gaussian(cov: &HermitianPsd, count: usize, seed: u64) -> Result<Vec<CVector>> {
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let factor = psd_factor(cov);
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| sample_with_factor(&factor, &mut stream_rng(seed, i)))
        .collect())
}

/// Unnormalized `V diag(1 + ξ) Vᴴ` and its eigenvalues `1 + ξ`.
pub(crate) fn random_covariance_spectrum(n: usize, seed: u64) -> (CMatrix, Vec<f64>) {
    let mut rng = stream_rng(seed, 0);
    let mut entries = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        let re: f64 = rng.random();
        let im: f64 = rng.random();
        entries.push(Complex64::new(re, im));
    }
    let s = CMatrix::from_row_slice(n, n, &entries);
    let v = SymmetricEigen::new(s.adjoint() * &s).eigenvectors;
    let spectrum: Vec<f64> = (0..n).map(|_| 1.0 + rng.random::<f64>()).collect();
    let d = CVector::from_iterator(n, spectrum.iter().map(|&x| Complex64::new(x, 0.0)));
    let c = &v * CMatrix::from_diagonal(&d) * v.adjoint();
    (c, spectrum)
}

/// Random channel covariance with eigenvalues drawn from `1 + U[0, 1)` on the
/// eigenbasis of `SᴴS` (`S` with i.i.d. uniform real and imaginary parts),
/// normalized to trace `n`.
pub fn random_channel_covariance(n: usize, seed: u64) -> Result<HermitianPsd> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let (c, _) = random_covariance_spectrum(n, seed);
    let sym = (&c + c.adjoint()).scale(0.5);
    let tr: f64 = sym.diagonal().iter().map(|z| z.re).sum();
    HermitianPsd::new(sym.scale(n as f64 / tr))
}

fn check_symmetric(cov: &RMatrix) -> Result<()> {
    let (rows, cols) = cov.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scale = (cov.trace() / rows.max(1) as f64).abs().max(1.0);
    let asym = (cov - cov.transpose()).amax();
    if asym > HERMITIAN_TOL * scale {
        return Err(Error::NotHermitian(asym));
    }
    Ok(())
}

/// The transformed integrand: Cholesky factor (row-major lower triangle) of
/// the reordered, sign-flipped covariance and the lower integration limits.
struct OrthantIntegrand {
    dim: usize,
    chol: Vec<f64>,
    lower: Vec<f64>,
}

impl OrthantIntegrand {
    fn new(mean: &[f64], cov: &RMatrix, orthant: &OrthantSpec) -> Result<Self> {
        let dim = orthant.len();
        let s: Vec<f64> = orthant.signs().iter().map(|&v| v as f64).collect();
        // w = D(x − μ) ~ N(0, D C D); the orthant is w_k > −s_k μ_k.
        let lower: Vec<f64> = (0..dim).map(|k| -s[k] * mean[k]).collect();
        let marginal: Vec<f64> = (0..dim)
            .map(|k| {
                let sd = cov[(k, k)].max(0.0).sqrt();
                if sd > 0.0 {
                    normal_cdf(-lower[k] / sd)
                } else if lower[k] < 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| marginal[a].total_cmp(&marginal[b]));
        let permuted = RMatrix::from_fn(dim, dim, |i, j| s[order[i]] * s[order[j]] * cov[(order[i], order[j])]);
        let l = cholesky_lower(&permuted)?;
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                chol[i * dim + j] = l[(i, j)];
            }
        }
        Ok(Self { dim, chol, lower: order.iter().map(|&k| lower[k]).collect() })
    }

    /// Integrand value at a point of the `(dim − 1)`-dimensional unit cube.
    fn eval(&self, u: &[f64], y: &mut [f64]) -> f64 {
        let mut f = 1.0;
        for i in 0..self.dim {
            let row = &self.chol[i * self.dim..i * self.dim + i + 1];
            let shift: f64 = row[..i].iter().zip(y.iter()).map(|(l, y)| l * y).sum();
            let t = (self.lower[i] - shift) / row[i];
            let width = normal_cdf(-t);
            f *= width;
            if f == 0.0 {
                return 0.0;
            }
            if i + 1 < self.dim {
                // Inverse-CDF draw from N(0,1) truncated to (t, ∞), written in
                // the upper tail for accuracy when `width` is small.
                let p = ((1.0 - u[i]) * width).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                y[i] = -normal_quantile(p);
            }
        }
        f
    }
}

/// Generator of the R_d lattice: `α_k = φ_d^{−k}` with `φ_d^{d+1} = φ_d + 1`.
fn kronecker_generator(dim: usize) -> Vec<f64> {
    let mut phi = 2.0_f64;
    for _ in 0..64 {
        let p = (dim + 1) as f64;
        phi -= (phi.powf(p) - phi - 1.0) / (p * phi.powf(p - 1.0) - 1.0);
    }
    (1..=dim).map(|k| phi.powi(-(k as i32)).fract()).collect()
}

fn batch_mean(integrand: &OrthantIntegrand, budget: &IntegrationBudget, batch: usize, alpha: &[f64]) -> f64 {
    let free = integrand.dim.saturating_sub(1);
    let mut rng: StreamRng = stream_rng(budget.seed, batch as u64);
    let mut u = vec![0.0; free];
    let mut y = vec![0.0; integrand.dim];
    let shift: Vec<f64> = if budget.quasi { (0..free).map(|_| rng.random()).collect() } else { Vec::new() };
    let n = budget.per_batch();
    let mut sum = 0.0;
    for i in 0..n {
        if budget.quasi {
            for k in 0..free {
                u[k] = (shift[k] + (i + 1) as f64 * alpha[k]).fract();
            }
        } else {
            for v in u.iter_mut() {
                *v = rng.random();
            }
        }
        sum += integrand.eval(&u, &mut y);
    }
    sum / n as f64
}

/// `P(sign(x_k) = s_k for all k)` for `x ~ N(mean, cov)`.
pub fn mvn_orthant_prob(
    mean: &[f64],
    cov: &RMatrix,
    orthant: &OrthantSpec,
    budget: &IntegrationBudget,
) -> Result<ProbEstimate> {
    let dim = orthant.len();
    if dim == 0 {
        return Ok(ProbEstimate::exact(1.0));
    }
    if cov.nrows() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: cov.nrows() });
    }
    if mean.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: mean.len() });
    }
    check_symmetric(cov)?;
    if budget.sample_count < MIN_SAMPLES {
        return Err(Error::InvalidBudget(format!("sample_count {}", budget.sample_count)));
    }
    let integrand = OrthantIntegrand::new(mean, cov, orthant)?;
    if dim == 1 {
        return Ok(ProbEstimate::exact(integrand.eval(&[], &mut [0.0])));
    }
    let alpha = kronecker_generator(dim - 1);
    let means: Vec<f64> =
        (0..BATCHES).into_par_iter().map(|b| batch_mean(&integrand, budget, b, &alpha)).collect();
    let value = means.iter().sum::<f64>() / BATCHES as f64;
    let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
    Ok(ProbEstimate { value: value.clamp(0.0, 1.0), stderr: (var / BATCHES as f64).sqrt() })
}

/// Covariance of the remaining coordinates conditioned on `x_index = 0`:
/// the Schur complement `C₋ₙ₋ₙ − C₋ₙₙ Cₙₙ⁻¹ Cₙ₋ₙ`.
pub fn reduced_density_cov(cov: &RMatrix, index: usize) -> Result<RMatrix> {
    let k = cov.nrows();
    if k < 2 {
        return Err(Error::InvalidArgument("reduced covariance needs dimension >= 2".into()));
    }
    if index >= k {
        return Err(Error::DimensionMismatch { expected: k, found: index });
    }
    let pivot = cov[(index, index)];
    if !(pivot > 0.0) {
        return Err(Error::NotPositiveDefinite { index, pivot });
    }
    let keep: Vec<usize> = (0..k).filter(|&i| i != index).collect();
    Ok(RMatrix::from_fn(k - 1, k - 1, |i, j| {
        let (a, b) = (keep[i], keep[j]);
        cov[(a, b)] - cov[(a, index)] * cov[(index, b)] / pivot
    }))
}

/// Unnormalized first moment of a zero-mean Gaussian restricted to an
/// orthant, together with the orthant probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedMoments {
    /// `E[x · 1{x in orthant}]`, componentwise.
    pub weighted_mean: Vec<f64>,
    pub weighted_stderr: Vec<f64>,
    pub prob: ProbEstimate,
}

impl TruncatedMoments {
    /// `E[x | x in orthant]`.
    pub fn mean(&self) -> Vec<f64> {
        self.weighted_mean.iter().map(|u| u / self.prob.value).collect()
    }

    /// Delta-method standard error of [`Self::mean`].
    pub fn mean_stderr(&self) -> Vec<f64> {
        let p = self.prob.value;
        self.weighted_mean
            .iter()
            .zip(&self.weighted_stderr)
            .map(|(u, se)| ((se / p).powi(2) + (u * self.prob.stderr / (p * p)).powi(2)).sqrt())
            .collect()
    }
}

/// Truncated-orthant mean of `x ~ N(0, cov)` via the one-sided Tallis
/// formula: for every coordinate `i`,
/// `E[x_i 1{x ∈ O}] = Σₙ sₙ C_{i,n} φ(0; Cₙₙ) P(x₋ₙ ∈ O₋ₙ | xₙ = 0)`.
pub fn truncated_orthant_mean(
    cov: &RMatrix,
    orthant: &OrthantSpec,
    budget: &IntegrationBudget,
) -> Result<TruncatedMoments> {
    let k = orthant.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if cov.nrows() != k {
        return Err(Error::DimensionMismatch { expected: k, found: cov.nrows() });
    }
    check_symmetric(cov)?;
    let zeros = vec![0.0; k];
    let prob = mvn_orthant_prob(&zeros, cov, orthant, budget)?;
    let conditional: Vec<ProbEstimate> = (0..k)
        .map(|n| {
            if k == 1 {
                return Ok(ProbEstimate::exact(1.0));
            }
            let reduced = reduced_density_cov(cov, n)?;
            let sub = budget.with_seed(derive_seed(budget.seed, n as u64 + 1));
            mvn_orthant_prob(&zeros[1..], &reduced, &orthant.without(n), &sub)
        })
        .collect::<Result<_>>()?;
    let signs = orthant.signs();
    let mut weighted_mean = vec![0.0; k];
    let mut weighted_stderr = vec![0.0; k];
    for i in 0..k {
        let mut var = 0.0;
        for n in 0..k {
            let cnn = cov[(n, n)];
            let density = (2.0 * std::f64::consts::PI * cnn).sqrt().recip();
            let coef = signs[n] as f64 * cov[(i, n)] * density;
            weighted_mean[i] += coef * conditional[n].value;
            var += (coef * conditional[n].stderr).powi(2);
        }
        weighted_stderr[i] = var.sqrt();
    }
    Ok(TruncatedMoments { weighted_mean, weighted_stderr, prob })
}
