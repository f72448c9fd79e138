//! Conditional-mean estimators `E[h | r]`.
//!
//! Closed forms exist for a scalar channel observed once, and for a scalar
//! channel observed noiselessly through several pilots, where the quantized
//! pattern pins the channel phase to a sector. The multivariate noiseless
//! estimator reduces to truncated Gaussian moments; everything else goes
//! through self-normalized importance sampling with the prior as proposal.

use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, FRAC_PI_4, PI, TAU};

use num_complex::Complex64;

use crate::channel::{optimal_phases, QuantizedObs};
use crate::error::{Error, Result};
use crate::gaussian::{
    mvn_orthant_prob, sample_with_factor, truncated_orthant_mean, IntegrationBudget, OrthantSpec, ProbEstimate,
};
use crate::linalg::{erfc, psd_factor, real_stack_cov, stack_real, CMatrix, CVector, HermitianPsd};
use crate::rng::{derive_seed, stream_rng};

/// Smallest admissible importance-sampling budget.
pub const MIN_PRIOR_SAMPLES: usize = 1000;
/// Weight sums below this switch to log-domain weights.
pub const MIN_WEIGHT_SUM: f64 = 1e-300;

/// Phase interval `[phi_low, phi_high)` pinned down by a pilot pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorBounds {
    /// In `[0, 2π)`.
    pub phi_low: f64,
    /// `phi_low` plus the sector width.
    pub phi_high: f64,
    /// Whether the pattern can occur without noise.
    pub consistent: bool,
}

impl SectorBounds {
    pub fn width(&self) -> f64 {
        self.phi_high - self.phi_low
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.phi_low + self.phi_high)
    }
}

/// Monte-Carlo budgets of the numeric estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmeBudget {
    /// Prior draws for importance sampling.
    pub prior_samples: usize,
    /// Budget of every orthant integral.
    pub mvn: IntegrationBudget,
}

impl CmeBudget {
    pub fn new(prior_samples: usize, mvn: IntegrationBudget) -> Result<Self> {
        if prior_samples < MIN_PRIOR_SAMPLES {
            return Err(Error::InvalidBudget(format!("prior_samples {prior_samples} < {MIN_PRIOR_SAMPLES}")));
        }
        Ok(Self { prior_samples, mvn })
    }

    pub fn seed(&self) -> u64 {
        self.mvn.seed
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { mvn: self.mvn.with_seed(seed), ..self }
    }
}

impl Default for CmeBudget {
    fn default() -> Self {
        Self { prior_samples: 20_000, mvn: IntegrationBudget::default() }
    }
}

/// A Monte-Carlo estimate with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub estimate: CVector,
    /// Standard errors of the real parts in `re`, of the imaginary parts in `im`.
    pub stderr: CVector,
    pub samples_used: usize,
    /// Kish effective sample size of the importance weights.
    pub effective_samples: f64,
    /// False when every weight vanished; the estimate is then the prior mean.
    pub degenerate: bool,
}

/// `√(2/π) σ² / √(σ² + η²) · r`.
pub fn cme_univariate(r: Complex64, sigma2: f64, eta2: f64) -> Complex64 {
    r * (FRAC_2_PI.sqrt() * sigma2 / (sigma2 + eta2).sqrt())
}

/// `σ²(1 − (2/π) σ²/(σ² + η²))`.
pub fn mse_univariate_closed(sigma2: f64, eta2: f64) -> f64 {
    sigma2 * (1.0 - FRAC_2_PI * sigma2 / (sigma2 + eta2))
}

/// `σ²(1 − σ²/(σ² + η²))`, the LMMSE error without quantization.
pub fn mse_unquantized_closed(sigma2: f64, eta2: f64) -> f64 {
    sigma2 * (1.0 - sigma2 / (sigma2 + eta2))
}

fn check_phases(r: &QuantizedObs, psi: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::EmptyInput);
    }
    if r.len() != psi.len() {
        return Err(Error::DimensionMismatch { expected: psi.len(), found: r.len() });
    }
    if psi[0] != 0.0 {
        return Err(Error::InvalidPhases(format!("first phase {} != 0", psi[0])));
    }
    if psi.windows(2).any(|w| !(w[1] >= w[0])) || psi.iter().any(|p| !(*p < FRAC_PI_2)) {
        return Err(Error::InvalidPhases("phases must be nondecreasing in [0, π/2)".into()));
    }
    Ok(())
}

fn is_consistent(r: &QuantizedObs, psi: &[f64]) -> bool {
    let first = r.label(0);
    let next = (first + 1) % 4;
    let mut change = None;
    for k in 1..r.len() {
        let l = r.label(k);
        match change {
            None if l == first => {}
            None if l == next => change = Some(k),
            Some(_) if l == next => {}
            _ => return false,
        }
    }
    change.is_none_or(|k| psi[k] > psi[k - 1])
}

/// Sector of the channel phase for a single-antenna pattern observed through
/// pilots with phases `psi`, by a sequential scan over the pilots.
///
/// The first pilot bounds the phase to the quadrant of `r₁`; each following
/// pilot with an unchanged label tightens the upper bound, and the first label
/// change fixes the lower bound.
pub fn boundary_angles(r: &QuantizedObs, psi: &[f64]) -> Result<SectorBounds> {
    check_phases(r, psi)?;
    let mut phi_low = r.angle(0) - FRAC_PI_4;
    let phi_high_init = r.angle(0) + FRAC_PI_4;
    let mut phi_high = phi_high_init;
    for (k, &p) in psi.iter().enumerate().skip(1) {
        if r.label(k) == r.label(k - 1) {
            phi_high = phi_high_init - p;
        } else {
            phi_low = phi_high_init - p;
            break;
        }
    }
    let width = phi_high - phi_low;
    let phi_low = phi_low.rem_euclid(TAU);
    Ok(SectorBounds { phi_low, phi_high: phi_low + width, consistent: is_consistent(r, psi) })
}

/// Lower sector bound for equidistant pilots as the circular mean of the
/// label angles minus `π/4`; each angle is taken on the branch nearest `∠r₁`.
pub fn boundary_angles_compact(r: &QuantizedObs) -> f64 {
    let first = r.angle(0);
    let sum: f64 = (0..r.len())
        .map(|k| {
            let d = (r.angle(k) - first + PI).rem_euclid(TAU) - PI;
            first + d
        })
        .sum();
    (sum / r.len() as f64 - FRAC_PI_4).rem_euclid(TAU)
}

/// Mean of a Rayleigh magnitude with `E|h|² = σ²` times the mean unit phasor
/// over `[phi_low, phi_high)`.
fn sector_mean(bounds: &SectorBounds, sigma: f64) -> Complex64 {
    let w = bounds.width();
    let magnitude = 0.5 * PI.sqrt() * sigma * (2.0 / w) * (0.5 * w).sin();
    Complex64::from_polar(magnitude, bounds.midpoint())
}

/// Noiseless CME of a scalar channel `h ~ N_C(0, σ²)` observed through pilots
/// with arbitrary phases `psi`.
pub fn cme_noiseless_sector(r: &QuantizedObs, psi: &[f64], sigma: f64) -> Result<Complex64> {
    Ok(sector_mean(&boundary_angles(r, psi)?, sigma))
}

/// Noiseless CME for `m` equidistant pilots:
/// `(2Mσ/√π) sin(π/4M) exp(j(π/4M + φ_low))`.
pub fn cme_multipilot(r: &QuantizedObs, m: usize, sigma: f64) -> Result<Complex64> {
    let bounds = boundary_angles(r, &optimal_phases(m))?;
    let mf = m as f64;
    let magnitude = 2.0 * mf * sigma / PI.sqrt() * (PI / (4.0 * mf)).sin();
    Ok(Complex64::from_polar(magnitude, PI / (4.0 * mf) + bounds.phi_low))
}

/// `σ²(1 − (4M²/π) sin²(π/4M))`.
pub fn mse_multipilot_closed(m: usize, sigma2: f64) -> f64 {
    let mf = m as f64;
    sigma2 * (1.0 - 4.0 * mf * mf / PI * (PI / (4.0 * mf)).sin().powi(2))
}

/// `σ²(1 − π/4)`.
pub fn mse_limit(sigma2: f64) -> f64 {
    sigma2 * (1.0 - FRAC_PI_4)
}

/// Exact noiseless MSE of [`cme_noiseless_sector`] for pilot phases `psi`.
///
/// The quantizer cuts the phase circle at `kπ/2 − ψ_m`; a sector of width
/// `w` occurs with probability `w/2π` and leaves error
/// `σ² − (π/4)σ²(2 sin(w/2)/w)²`.
pub fn mse_sector_closed(psi: &[f64], sigma2: f64) -> f64 {
    let mut cuts: Vec<f64> = psi
        .iter()
        .flat_map(|p| (0..4).map(move |k| (k as f64 * FRAC_PI_2 - p).rem_euclid(TAU)))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let explained: f64 = (0..cuts.len())
        .map(|i| {
            let next = if i + 1 < cuts.len() { cuts[i + 1] } else { cuts[0] + TAU };
            let w = next - cuts[i];
            w / TAU * FRAC_PI_4 * (2.0 * (0.5 * w).sin() / w).powi(2)
        })
        .sum();
    sigma2 * (1.0 - explained)
}

/// Noiseless single-pilot CME of a correlated channel: the stacked real
/// channel `[Re h; Im h] ~ N(0, ½[[Re C, −Im C], [Im C, Re C]])` conditioned
/// on the orthant selected by `r`.
pub fn cme_multivariate_noiseless(r: &QuantizedObs, c_h: &HermitianPsd, budget: &CmeBudget) -> Result<EstimateResult> {
    if r.len() != c_h.dim() {
        return Err(Error::DimensionMismatch { expected: c_h.dim(), found: r.len() });
    }
    let cov = real_stack_cov(c_h).scale(0.5);
    if let Some(i) = (0..cov.nrows()).find(|&i| !(cov[(i, i)] > 0.0)) {
        return Err(Error::DegenerateCovariance(format!("zero variance in stacked component {i}")));
    }
    let orthant = OrthantSpec::new(r.real_signs().to_vec())?;
    let moments = truncated_orthant_mean(&cov, &orthant, &budget.mvn)?;
    if !(moments.prob.value > 0.0) {
        return Err(Error::DegenerateCovariance("orthant probability estimate is zero".into()));
    }
    let mean = moments.mean();
    let se = moments.mean_stderr();
    let n = r.len();
    Ok(EstimateResult {
        estimate: CVector::from_fn(n, |i, _| Complex64::new(mean[i], mean[n + i])),
        stderr: CVector::from_fn(n, |i, _| Complex64::new(se[i], se[n + i])),
        samples_used: budget.mvn.sample_count,
        effective_samples: budget.mvn.sample_count as f64,
        degenerate: false,
    })
}

/// `ln(½ erfc(z))` without underflow for large `z`.
fn ln_half_erfc(z: f64) -> f64 {
    let e = erfc(z);
    if e > 1e-300 {
        return (0.5 * e).ln();
    }
    let z2 = z * z;
    let series = 1.0 - 1.0 / (2.0 * z2) + 3.0 / (4.0 * z2 * z2) - 15.0 / (8.0 * z2 * z2 * z2);
    -z2 - z.ln() - 0.5 * PI.ln() + series.ln() - std::f64::consts::LN_2
}

enum NoiseModel {
    /// Per-entry `√(C_n)_kk`; zero means a noiseless entry.
    Diagonal(Vec<f64>),
    Full(nalgebra::DMatrix<f64>),
}

/// Importance sampler for `E[h | r]` under `r = Q(Ah + n)` with the prior as
/// proposal, reusable across observations of the same system.
pub struct ImportanceSampler {
    a_mat: CMatrix,
    factor: CMatrix,
    noise: NoiseModel,
    budget: CmeBudget,
}

impl ImportanceSampler {
    pub fn new(a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd, budget: &CmeBudget) -> Result<Self> {
        if a_mat.ncols() != c_h.dim() {
            return Err(Error::DimensionMismatch { expected: c_h.dim(), found: a_mat.ncols() });
        }
        if a_mat.nrows() != c_n.dim() {
            return Err(Error::DimensionMismatch { expected: c_n.dim(), found: a_mat.nrows() });
        }
        if budget.prior_samples < MIN_PRIOR_SAMPLES {
            return Err(Error::InvalidBudget(format!("prior_samples {}", budget.prior_samples)));
        }
        let noise = if c_n.is_diagonal() {
            NoiseModel::Diagonal(c_n.diag().iter().map(|v| v.max(0.0).sqrt()).collect())
        } else {
            NoiseModel::Full(real_stack_cov(c_n).scale(0.5))
        };
        Ok(Self { a_mat: a_mat.clone(), factor: psd_factor(c_h), noise, budget: *budget })
    }

    /// `ln p(r | h)` through `μ = A h`; `None` for an exact zero.
    fn log_likelihood(&self, r: &QuantizedObs, mu: &CVector, seed: u64) -> Result<Option<f64>> {
        let l = mu.len();
        let signs = r.real_signs();
        match &self.noise {
            NoiseModel::Diagonal(eta) => {
                let mut acc = 0.0;
                for k in 0..2 * l {
                    let m = if k < l { mu[k].re } else { mu[k - l].im };
                    let s = signs[k] as f64;
                    let e = eta[k % l];
                    if e == 0.0 {
                        if (m >= 0.0) != (s > 0.0) {
                            return Ok(None);
                        }
                        continue;
                    }
                    acc += ln_half_erfc(-s * m / e);
                }
                Ok(Some(acc))
            }
            NoiseModel::Full(cov) => {
                let mean: Vec<f64> = stack_real(mu).iter().copied().collect();
                let orthant = OrthantSpec::new(signs.to_vec())?;
                let p = mvn_orthant_prob(&mean, cov, &orthant, &self.budget.mvn.with_seed(seed))?;
                Ok((p.value > 0.0).then(|| p.value.ln()))
            }
        }
    }

    /// Self-normalized estimate from `prior_samples` draws of stream 0 of `seed`.
    pub fn estimate(&self, r: &QuantizedObs, seed: u64) -> Result<EstimateResult> {
        if r.len() != self.a_mat.nrows() {
            return Err(Error::DimensionMismatch { expected: self.a_mat.nrows(), found: r.len() });
        }
        let k = self.budget.prior_samples;
        let n = self.a_mat.ncols();
        let mut rng = stream_rng(seed, 0);
        let mut draws = Vec::with_capacity(k);
        let mut logw = Vec::with_capacity(k);
        for i in 0..k {
            let h = sample_with_factor(&self.factor, &mut rng);
            let mu = &self.a_mat * &h;
            let lw = self.log_likelihood(r, &mu, derive_seed(seed, i as u64 + 1))?;
            draws.push(h);
            logw.push(lw.unwrap_or(f64::NEG_INFINITY));
        }
        let mut weights: Vec<f64> = logw.iter().map(|lw| lw.exp()).collect();
        let mut total: f64 = weights.iter().sum();
        if !(total >= MIN_WEIGHT_SUM) {
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max.is_finite() {
                weights = logw.iter().map(|lw| (lw - max).exp()).collect();
                total = weights.iter().sum();
            }
        }
        if !(total > 0.0) || !total.is_finite() {
            return Ok(EstimateResult {
                estimate: CVector::zeros(n),
                stderr: CVector::zeros(n),
                samples_used: k,
                effective_samples: 0.0,
                degenerate: true,
            });
        }
        let mut est = CVector::zeros(n);
        for (h, w) in draws.iter().zip(&weights) {
            est += h * Complex64::new(w / total, 0.0);
        }
        let mut var_re = vec![0.0; n];
        let mut var_im = vec![0.0; n];
        let mut sumsq = 0.0;
        for (h, w) in draws.iter().zip(&weights) {
            let wn = w / total;
            sumsq += wn * wn;
            for j in 0..n {
                let d = h[j] - est[j];
                var_re[j] += wn * wn * d.re * d.re;
                var_im[j] += wn * wn * d.im * d.im;
            }
        }
        Ok(EstimateResult {
            estimate: est,
            stderr: CVector::from_fn(n, |j, _| Complex64::new(var_re[j].sqrt(), var_im[j].sqrt())),
            samples_used: k,
            effective_samples: 1.0 / sumsq,
            degenerate: false,
        })
    }
}

/// `E[h | r]` by importance sampling with the prior as proposal; the seed is
/// taken from the budget.
pub fn cme_general_numeric(
    r: &QuantizedObs,
    a_mat: &CMatrix,
    c_h: &HermitianPsd,
    c_n: &HermitianPsd,
    budget: &CmeBudget,
) -> Result<EstimateResult> {
    ImportanceSampler::new(a_mat, c_h, c_n, budget)?.estimate(r, budget.seed())
}

/// `P(Q(Ah + n) = r)` over the noise. Exact for diagonal `C_n`.
pub fn conditional_prob_r_given_h(
    r: &QuantizedObs,
    h: &CVector,
    a_mat: &CMatrix,
    c_n: &HermitianPsd,
    budget: &IntegrationBudget,
) -> Result<ProbEstimate> {
    if a_mat.ncols() != h.len() {
        return Err(Error::DimensionMismatch { expected: a_mat.ncols(), found: h.len() });
    }
    if a_mat.nrows() != r.len() || c_n.dim() != r.len() {
        return Err(Error::DimensionMismatch { expected: r.len(), found: a_mat.nrows().max(c_n.dim()) });
    }
    let mu = a_mat * h;
    let mean: Vec<f64> = stack_real(&mu).iter().copied().collect();
    let orthant = OrthantSpec::new(r.real_signs().to_vec())?;
    if c_n.is_diagonal() {
        let l = r.len();
        let diag = c_n.diag();
        let mut p = 1.0;
        for (k, (&m, &s)) in mean.iter().zip(orthant.signs()).enumerate() {
            let e = diag[k % l].max(0.0).sqrt();
            let s = s as f64;
            p *= if e == 0.0 {
                f64::from(u8::from((m >= 0.0) == (s > 0.0)))
            } else {
                0.5 * erfc(-s * m / e)
            };
        }
        return Ok(ProbEstimate::exact(p));
    }
    mvn_orthant_prob(&mean, &real_stack_cov(c_n).scale(0.5), &orthant, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{pilot_vector, quantize, system_matrix, PilotKind};
    use crate::bussgang::bussgang_mse_multipilot;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn obs(labels: &[u8]) -> QuantizedObs {
        QuantizedObs::from_labels(labels).unwrap()
    }

    /// Sector by brute force: scan a fine phase grid and keep the phases whose
    /// noiseless pattern equals `r`.
    fn brute_force_sector(r: &QuantizedObs, psi: &[f64]) -> Option<(f64, f64)> {
        let steps = 1 << 16;
        let hits: Vec<f64> = (0..steps)
            .map(|i| (i as f64 + 0.5) * TAU / steps as f64)
            .filter(|&phi| {
                let y = CVector::from_iterator(psi.len(), psi.iter().map(|p| Complex64::from_polar(1.0, phi + p)));
                quantize(&y) == *r
            })
            .collect();
        if hits.is_empty() {
            return None;
        }
        // the sector may straddle 0
        let gap = hits.windows(2).position(|w| w[1] - w[0] > 1e-3);
        let (lo, hi) = match gap {
            Some(i) => (hits[i + 1], hits[i] + TAU),
            None => (hits[0], hits[hits.len() - 1]),
        };
        Some((lo, hi))
    }

    #[test]
    fn univariate_examples() {
        let r = Complex64::new(1.0, 1.0) * std::f64::consts::FRAC_1_SQRT_2;
        let z = cme_univariate(r, 1.0, 0.0);
        assert_abs_diff_eq!(z.re, 0.564_190, epsilon = 1e-6);
        assert_abs_diff_eq!(z.im, 0.564_190, epsilon = 1e-6);
        assert!(cme_univariate(r, 1.0, 1e30).norm() < 1e-14);
        assert_abs_diff_eq!(cme_univariate(r, 1.0, 1.0).re, 0.398_942, epsilon = 1e-6);
        assert_abs_diff_eq!(mse_univariate_closed(1.0, 0.0), 0.363_380, epsilon = 1e-6);
        assert_abs_diff_eq!(mse_univariate_closed(1.0, 1.0), 0.681_690, epsilon = 1e-6);
        assert_abs_diff_eq!(mse_unquantized_closed(1.0, 1.0), 0.5, epsilon = 1e-15);
        let snr = 2.0 / (PI - 2.0);
        assert_abs_diff_eq!(mse_unquantized_closed(1.0, 1.0 / snr), mse_univariate_closed(1.0, 0.0), epsilon = 1e-14);
        assert_abs_diff_eq!(10.0 * snr.log10(), 2.435, epsilon = 1e-3);
    }

    #[test]
    fn boundary_examples() {
        let b = boundary_angles(&obs(&[0]), &[0.0]).unwrap();
        assert_abs_diff_eq!(b.phi_low, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.phi_high, FRAC_PI_2, epsilon = 1e-15);
        let psi = optimal_phases(3);
        let b = boundary_angles(&obs(&[0, 0, 0]), &psi).unwrap();
        assert_abs_diff_eq!(b.phi_low, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.phi_high, PI / 6.0, epsilon = 1e-15);
        let b = boundary_angles(&obs(&[0, 0, 1]), &psi).unwrap();
        assert_abs_diff_eq!(b.phi_low, PI / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.phi_high, PI / 3.0, epsilon = 1e-15);
        assert!(b.consistent);
        assert_abs_diff_eq!(boundary_angles_compact(&obs(&[0, 0, 1])), PI / 6.0, epsilon = 1e-15);
        assert!(!boundary_angles(&obs(&[0, 2, 0]), &psi).unwrap().consistent);
        assert!(!boundary_angles(&obs(&[0, 1, 0]), &psi).unwrap().consistent);
    }

    #[test]
    fn seam_pattern() {
        // labels 3 then 0: the phase sits just below 2π
        let psi = optimal_phases(2);
        let b = boundary_angles(&obs(&[3, 0]), &psi).unwrap();
        assert_abs_diff_eq!(b.phi_low, 7.0 * PI / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.width(), FRAC_PI_4, epsilon = 1e-12);
        assert_abs_diff_eq!(boundary_angles_compact(&obs(&[3, 0])), 7.0 * PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn boundary_matches_brute_force_for_all_reachable_patterns() {
        for m in 1..=5usize {
            let psi = optimal_phases(m);
            let mut seen = 0;
            for l0 in 0..4u8 {
                for k in 1..=m {
                    let labels: Vec<u8> = (0..m).map(|i| if i < k { l0 } else { (l0 + 1) % 4 }).collect();
                    let r = obs(&labels);
                    let Some((lo, hi)) = brute_force_sector(&r, &psi) else { continue };
                    seen += 1;
                    let b = boundary_angles(&r, &psi).unwrap();
                    let step = TAU / f64::from(1 << 16);
                    let dlo = (b.phi_low - lo + PI).rem_euclid(TAU) - PI;
                    assert!(dlo.abs() < step, "M={m} {labels:?}: {} vs {lo}", b.phi_low);
                    assert!((b.width() - (hi - lo)).abs() < 2.0 * step);
                    assert_abs_diff_eq!(b.width(), PI / (2.0 * m as f64), epsilon = 1e-12);
                }
            }
            assert_eq!(seen, 4 * m);
        }
    }

    #[test]
    fn boundary_general_phases_against_brute_force() {
        let psi = [0.0, 0.3, 0.4, 1.2];
        for l0 in 0..4u8 {
            for k in 1..=4 {
                let labels: Vec<u8> = (0..4).map(|i| if i < k { l0 } else { (l0 + 1) % 4 }).collect();
                let r = obs(&labels);
                let (lo, hi) = brute_force_sector(&r, &psi).unwrap();
                let b = boundary_angles(&r, &psi).unwrap();
                let dlo = (b.phi_low - lo + PI).rem_euclid(TAU) - PI;
                assert!(dlo.abs() < 1e-3);
                assert!((b.width() - (hi - lo)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn boundary_rejects_bad_phases() {
        assert!(boundary_angles(&obs(&[0, 0]), &[0.1, 0.2]).is_err());
        assert!(boundary_angles(&obs(&[0, 0]), &[0.0, 2.0]).is_err());
        assert!(boundary_angles(&obs(&[0, 0]), &[0.0]).is_err());
        // repeated phases are accepted
        let b = boundary_angles(&obs(&[1, 1, 1]), &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(b.width(), FRAC_PI_2, epsilon = 1e-15);
        assert!(!boundary_angles(&obs(&[1, 2]), &[0.0; 2]).unwrap().consistent);
    }

    proptest! {
        #[test]
        fn compact_form_agrees(m in 1usize..=16, l0 in 0u8..4, k_raw in 0usize..16) {
            let k = k_raw % m + 1;
            let labels: Vec<u8> = (0..m).map(|i| if i < k { l0 } else { (l0 + 1) % 4 }).collect();
            let r = obs(&labels);
            let b = boundary_angles(&r, &optimal_phases(m)).unwrap();
            let d = (b.phi_low - boundary_angles_compact(&r) + PI).rem_euclid(TAU) - PI;
            prop_assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn multipilot_examples() {
        let r = obs(&[0]);
        let z = cme_multipilot(&r, 1, 1.0).unwrap();
        assert!((z - cme_univariate(r.get(0), 1.0, 0.0)).norm() < 1e-14);
        let z = cme_multipilot(&obs(&[2, 2]), 2, 1.0).unwrap();
        assert_abs_diff_eq!(z.norm(), 4.0 / PI.sqrt() * (PI / 8.0).sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(z.norm(), 0.863_624, epsilon = 1e-6);
        for labels in [[0u8, 0, 1], [3, 0, 0], [1, 1, 1]] {
            let r = obs(&labels);
            let b = boundary_angles(&r, &optimal_phases(3)).unwrap();
            let z = cme_multipilot(&r, 3, 1.3).unwrap();
            let d = (z.arg() - b.phi_low - PI / 12.0 + PI).rem_euclid(TAU) - PI;
            assert!(d.abs() < 1e-12);
            assert!((cme_noiseless_sector(&r, &optimal_phases(3), 1.3).unwrap() - z).norm() < 1e-12);
        }
    }

    #[test]
    fn multipilot_mse_properties() {
        assert_abs_diff_eq!(mse_multipilot_closed(1, 1.0), 0.363_380, epsilon = 1e-6);
        assert_abs_diff_eq!(mse_multipilot_closed(10, 1.0), 0.216_22, epsilon = 1e-5);
        assert_abs_diff_eq!(mse_limit(1.0), 0.214_602, epsilon = 1e-6);
        for m in 1..=64usize {
            assert_abs_diff_eq!(mse_multipilot_closed(m, 1.0), bussgang_mse_multipilot(m, 1.0), epsilon = 1e-12);
            assert!(mse_multipilot_closed(m + 1, 1.0) < mse_multipilot_closed(m, 1.0));
            assert!(mse_multipilot_closed(m, 1.0) > mse_limit(1.0));
            assert_abs_diff_eq!(mse_sector_closed(&optimal_phases(m), 1.0), mse_multipilot_closed(m, 1.0), epsilon = 1e-12);
        }
        // repeated pilots add nothing
        assert_abs_diff_eq!(mse_sector_closed(&[0.0; 4], 1.0), 1.0 - 2.0 / PI, epsilon = 1e-12);
        assert!(mse_sector_closed(&[0.0, 0.2, 0.3], 1.0) > mse_sector_closed(&optimal_phases(3), 1.0));
    }

    #[test]
    fn sector_mse_matches_monte_carlo() {
        let psi = [0.0, 0.2, 1.0];
        let mut rng = stream_rng(11, 0);
        let trials = 200_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let h = crate::gaussian::standard_complex_normal(&mut rng);
            let y = CVector::from_iterator(3, psi.iter().map(|p| h * Complex64::from_polar(1.0, *p)));
            let est = cme_noiseless_sector(&quantize(&y), &psi, 1.0).unwrap();
            acc += (h - est).norm_sqr();
        }
        assert_abs_diff_eq!(acc / trials as f64, mse_sector_closed(&psi, 1.0), epsilon = 4e-3);
    }

    #[test]
    fn multivariate_noiseless_reduces_to_scalar() {
        let budget = CmeBudget::default();
        for l in 0..4 {
            let r = obs(&[l]);
            let e = cme_multivariate_noiseless(&r, &HermitianPsd::identity(1), &budget).unwrap();
            assert!((e.estimate[0] - cme_univariate(r.get(0), 1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn multivariate_noiseless_diagonal_is_elementwise() {
        let c = HermitianPsd::diagonal(&[0.5, 1.0, 1.5]).unwrap();
        let budget = CmeBudget::new(4000, IntegrationBudget::new(20_000, 3).unwrap()).unwrap();
        let r = obs(&[0, 2, 3]);
        let e = cme_multivariate_noiseless(&r, &c, &budget).unwrap();
        for (k, s2) in [0.5, 1.0, 1.5].into_iter().enumerate() {
            let expect = cme_univariate(r.get(k), s2, 0.0);
            let se = e.stderr[k];
            assert!((e.estimate[k].re - expect.re).abs() <= 3.0 * se.re + 1e-12);
            assert!((e.estimate[k].im - expect.im).abs() <= 3.0 * se.im + 1e-12);
        }
    }

    #[test]
    fn conditional_probability_examples() {
        let a = CMatrix::identity(1, 1);
        let r = obs(&[0]);
        let budget = IntegrationBudget::default();
        let h = CVector::from_element(1, Complex64::new(1.0, 0.5));
        let p = conditional_prob_r_given_h(&r, &h, &a, &HermitianPsd::scaled_identity(1, 1e-20).unwrap(), &budget)
            .unwrap();
        assert_abs_diff_eq!(p.value, 1.0, epsilon = 1e-15);
        assert_eq!(p.stderr, 0.0);
        let p = conditional_prob_r_given_h(&r, &h, &a, &HermitianPsd::scaled_identity(1, 0.0).unwrap(), &budget)
            .unwrap();
        assert_eq!(p.value, 1.0);
        // real part alone: η = 1, Re h = 1
        let h = CVector::from_element(1, Complex64::new(1.0, 0.0));
        let p = conditional_prob_r_given_h(&r, &h, &a, &HermitianPsd::identity(1), &budget).unwrap();
        assert_abs_diff_eq!(p.value, 0.921_350 * 0.5, epsilon = 1e-6);
    }

    #[test]
    fn conditional_probabilities_sum_to_one() {
        let budget = IntegrationBudget::new(20_000, 9).unwrap();
        let h = CVector::from_vec(vec![Complex64::new(0.3, -0.8)]);
        let a = system_matrix(&pilot_vector(&PilotKind::Optimal, 2).unwrap(), 1);
        let diag = HermitianPsd::scaled_identity(2, 0.7).unwrap();
        let full = HermitianPsd::new(CMatrix::from_row_slice(
            2,
            2,
            &[Complex64::new(0.7, 0.0), Complex64::new(0.2, 0.1), Complex64::new(0.2, -0.1), Complex64::new(0.5, 0.0)],
        ))
        .unwrap();
        for c_n in [diag, full] {
            let mut total = 0.0;
            let mut var = 0.0;
            for a0 in 0..4u8 {
                for a1 in 0..4u8 {
                    let p = conditional_prob_r_given_h(&obs(&[a0, a1]), &h, &a, &c_n, &budget).unwrap();
                    total += p.value;
                    var += p.stderr * p.stderr;
                }
            }
            assert!((total - 1.0).abs() <= 3.0 * var.sqrt() + 1e-12, "{total}");
        }
    }

    #[test]
    fn numeric_cme_matches_univariate() {
        let a = CMatrix::identity(1, 1);
        let budget = CmeBudget::new(20_000, IntegrationBudget::default()).unwrap();
        for l in 0..4 {
            let r = obs(&[l]);
            let e = cme_general_numeric(&r, &a, &HermitianPsd::identity(1), &HermitianPsd::identity(1), &budget)
                .unwrap();
            let z = cme_univariate(r.get(0), 1.0, 1.0);
            assert!((e.estimate[0].re - z.re).abs() <= 3.0 * e.stderr[0].re);
            assert!((e.estimate[0].im - z.im).abs() <= 3.0 * e.stderr[0].im);
            assert!(e.effective_samples > 1000.0);
        }
    }

    #[test]
    fn numeric_cme_degenerate_prior() {
        let a = CMatrix::identity(2, 2);
        let c_h = HermitianPsd::scaled_identity(2, 0.0).unwrap();
        let e = cme_general_numeric(&obs(&[0, 1]), &a, &c_h, &HermitianPsd::identity(2), &CmeBudget::default()).unwrap();
        assert_eq!(e.estimate, CVector::zeros(2));
    }

    #[test]
    fn numeric_cme_reports_degenerate_weights() {
        // noiseless and zero prior: every draw quantizes to q₁, so q₃ is impossible
        let a = CMatrix::identity(1, 1);
        let c_h = HermitianPsd::scaled_identity(1, 0.0).unwrap();
        let c_n = HermitianPsd::scaled_identity(1, 0.0).unwrap();
        let e = cme_general_numeric(&obs(&[2]), &a, &c_h, &c_n, &CmeBudget::default()).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.estimate, CVector::zeros(1));
    }

    #[test]
    fn numeric_cme_survives_tiny_weights() {
        // a very unlikely pattern at high SNR needs log-domain weights
        let a = system_matrix(&pilot_vector(&PilotKind::AllOnes, 40).unwrap(), 1);
        let c_n = HermitianPsd::scaled_identity(40, 1e-4).unwrap();
        let labels: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let e = cme_general_numeric(&obs(&labels), &a, &HermitianPsd::identity(1), &c_n, &CmeBudget::default())
            .unwrap();
        assert!(!e.degenerate);
        assert!(e.estimate[0].norm().is_finite());
    }

    #[test]
    fn ln_half_erfc_is_continuous() {
        for z in [-3.0, 0.0, 5.0, 20.0, 26.0] {
            assert_abs_diff_eq!(ln_half_erfc(z), (0.5 * erfc(z)).ln(), epsilon = 1e-9 * (1.0 + z * z));
        }
        let a = ln_half_erfc(26.5);
        let b = ln_half_erfc(26.6);
        assert!(a > b && (a - b) < 6.0);
        assert!(ln_half_erfc(1e3).is_finite());
    }

    #[test]
    fn numeric_cme_is_deterministic() {
        let a = system_matrix(&pilot_vector(&PilotKind::Optimal, 2).unwrap(), 2);
        let c_h = crate::gaussian::random_channel_covariance(2, 1).unwrap();
        let c_n = HermitianPsd::scaled_identity(4, 0.1).unwrap();
        let r = obs(&[0, 1, 1, 2]);
        let budget = CmeBudget::default().with_seed(5);
        let e1 = cme_general_numeric(&r, &a, &c_h, &c_n, &budget).unwrap();
        let e2 = cme_general_numeric(&r, &a, &c_h, &c_n, &budget).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn budget_validation() {
        assert!(CmeBudget::new(999, IntegrationBudget::default()).is_err());
        assert_eq!(CmeBudget::default().with_seed(7).seed(), 7);
    }
}
