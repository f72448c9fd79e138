//! Estimation-quality metrics: normalized MSE, cosine similarity and an
//! achievable-rate lower bound under matched-filter reception.

use num_complex::Complex64;

use crate::bussgang::{BussgangLinearization, MAX_CONDITION, RIDGE};
use crate::error::{Error, Result};
use crate::linalg::{solve_hermitian, CMatrix, CVector, HermitianPsd};

/// Running mean and standard error of a scalar sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    pub sum: f64,
    pub sumsq: f64,
    pub count: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.sum += x;
        self.sumsq += x * x;
        self.count += 1;
    }

    /// Combines two accumulators; merging in a fixed order keeps results
    /// reproducible.
    pub fn merge(&mut self, other: &Self) {
        self.sum += other.sum;
        self.sumsq += other.sumsq;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum / self.count as f64
    }

    /// Sample standard deviation over `√count`.
    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = ((self.sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

impl FromIterator<f64> for MetricAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// `‖h − ĥ‖² / n`.
pub fn normalized_squared_error(h: &CVector, h_hat: &CVector, n: usize) -> f64 {
    (h - h_hat).norm_squared() / n as f64
}

/// Mean of `‖h − ĥ‖² / n` with its standard error.
pub fn mse_empirical(pairs: &[(CVector, CVector)], n: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let acc: MetricAccumulator = pairs.iter().map(|(h, e)| normalized_squared_error(h, e, n)).collect();
    Ok((acc.mean(), acc.stderr()))
}

/// `Re(hᴴ ĥ) / (‖h‖ ‖ĥ‖)`.
pub fn cosine_similarity(h: &CVector, h_hat: &CVector) -> Result<f64> {
    if h.len() != h_hat.len() {
        return Err(Error::DimensionMismatch { expected: h.len(), found: h_hat.len() });
    }
    let (a, b) = (h.norm(), h_hat.norm());
    if a == 0.0 || b == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((h.dotc(h_hat).re / (a * b)).clamp(-1.0, 1.0))
}

/// `C_q = C_r − B C_h Bᴴ`.
pub fn distortion_cov(b: &CMatrix, c_r: &HermitianPsd, c_h: &HermitianPsd) -> CMatrix {
    c_r.matrix() - b * c_h.matrix() * b.adjoint()
}

/// `g = C_q⁻¹ B ĥ`.
pub fn matched_filter(h_hat: &CVector, b: &CMatrix, c_r: &HermitianPsd, c_h: &HermitianPsd) -> Result<CVector> {
    let c_q = distortion_cov(b, c_r, c_h);
    let rhs = CMatrix::from_column_slice(h_hat.len(), 1, (b * h_hat).as_slice());
    let (g, _) = solve_hermitian(&c_q, &rhs, MAX_CONDITION, RIDGE).ok_or(Error::SingularCq)?;
    Ok(g.column(0).into_owned())
}

/// Linearized single-shot data model `r = Q(h s + n)`, `E|s|² = 1`.
pub fn data_model(c_h: &HermitianPsd, eta2: f64) -> Result<BussgangLinearization> {
    let n = c_h.dim();
    BussgangLinearization::new(&CMatrix::identity(n, n), c_h, &HermitianPsd::scaled_identity(n, eta2)?)
}

/// `log₂(1 + |gᴴBĥ|² / (|gᴴBε|² + gᴴ B C_q Bᴴ g))` for one channel draw,
/// with `ε = h − ĥ`.
pub fn rate_term(h: &CVector, h_hat: &CVector, b: &CMatrix, c_r: &HermitianPsd, c_h: &HermitianPsd) -> Result<f64> {
    let g = matched_filter(h_hat, b, c_r, c_h)?;
    let signal = g.dotc(&(b * h_hat)).norm_sqr();
    if signal == 0.0 {
        return Ok(0.0);
    }
    let eps = h - h_hat;
    let leak = g.dotc(&(b * eps)).norm_sqr();
    let c_q = distortion_cov(b, c_r, c_h);
    let bg = b.adjoint() * &g;
    let distortion: Complex64 = bg.dotc(&(&c_q * &bg));
    let denom = leak + distortion.re.max(0.0);
    if !(denom > 0.0) {
        return Err(Error::SingularCq);
    }
    Ok((1.0 + signal / denom).log2())
}

/// Monte-Carlo mean of [`rate_term`] over `(h, ĥ)` pairs, in bits/s/Hz.
pub fn rate_lower_bound(
    trials: &[(CVector, CVector)],
    b: &CMatrix,
    c_r: &HermitianPsd,
    c_h: &HermitianPsd,
) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::EmptyInput);
    }
    let acc: MetricAccumulator =
        trials.iter().map(|(h, e)| rate_term(h, e, b, c_r, c_h)).collect::<Result<Vec<_>>>()?.into_iter().collect();
    Ok((acc.mean(), acc.stderr()))
}
