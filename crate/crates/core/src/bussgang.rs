//! The linear MMSE estimator on the Bussgang-linearized model
//! `r = B A h + q`, the arcsine law, and the closed forms available for
//! equidistant pilots in the noiseless scalar case.

use std::f64::consts::{FRAC_2_PI, PI};

use num_complex::Complex64;

use crate::channel::{optimal_phases, QuantizedObs};
use crate::error::{Error, Result};
use crate::linalg::{solve_hermitian, CMatrix, CVector, HermitianPsd};

/// Diagonal entries below this are treated as zero variance.
pub const MIN_VARIANCE: f64 = 1e-14;
/// Normalized correlations may overshoot 1 by at most this before clamping.
pub const ARCSIN_OVERSHOOT: f64 = 1e-12;
/// Spectral condition number above which `C_r` is diagonally loaded.
pub const MAX_CONDITION: f64 = 1e12;
/// Diagonal loading, relative to `trace / n`.
pub const RIDGE: f64 = 1e-12;

fn checked_diag(c_y: &HermitianPsd) -> Result<Vec<f64>> {
    let d = c_y.diag();
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| !(v > MIN_VARIANCE)) {
        return Err(Error::DegenerateVariance { index, value });
    }
    Ok(d)
}

/// `B = √(2/π) diag(C_y)^(−1/2)`.
pub fn bussgang_gain(c_y: &HermitianPsd) -> Result<CMatrix> {
    let d = checked_diag(c_y)?;
    let g = CVector::from_iterator(d.len(), d.iter().map(|v| Complex64::new(FRAC_2_PI.sqrt() / v.sqrt(), 0.0)));
    Ok(CMatrix::from_diagonal(&g))
}

fn clamped_asin(x: f64) -> Result<f64> {
    if x.abs() > 1.0 + ARCSIN_OVERSHOOT {
        return Err(Error::Domain(x));
    }
    Ok(x.clamp(-1.0, 1.0).asin())
}

/// Covariance of the quantized signal,
/// `C_r = (2/π)[asin(Ψ Re C_y Ψ) + j asin(Ψ Im C_y Ψ)]`, `Ψ = diag(C_y)^(−1/2)`.
pub fn arcsine_law(c_y: &HermitianPsd) -> Result<HermitianPsd> {
    let d = checked_diag(c_y)?;
    let psi: Vec<f64> = d.iter().map(|v| v.sqrt().recip()).collect();
    let n = d.len();
    let m = c_y.matrix();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let z = m[(i, j)] * (psi[i] * psi[j]);
            out[(i, j)] = Complex64::new(clamped_asin(z.re)?, clamped_asin(z.im)?) * FRAC_2_PI;
        }
    }
    for i in 0..n {
        out[(i, i)] = Complex64::new(1.0, 0.0);
    }
    HermitianPsd::new(out)
}

/// Gain, output covariance and channel/output cross-covariance of the
/// linearized model.
#[derive(Debug, Clone, PartialEq)]
pub struct BussgangLinearization {
    pub gain: CMatrix,
    pub c_r: HermitianPsd,
    pub c_hr: CMatrix,
}

impl BussgangLinearization {
    pub fn new(a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd) -> Result<Self> {
        if a_mat.ncols() != c_h.dim() {
            return Err(Error::DimensionMismatch { expected: c_h.dim(), found: a_mat.ncols() });
        }
        if a_mat.nrows() != c_n.dim() {
            return Err(Error::DimensionMismatch { expected: c_n.dim(), found: a_mat.nrows() });
        }
        let c_y = HermitianPsd::new(a_mat * c_h.matrix() * a_mat.adjoint() + c_n.matrix())?;
        let gain = bussgang_gain(&c_y)?;
        let c_r = arcsine_law(&c_y)?;
        let c_hr = c_h.matrix() * a_mat.adjoint() * gain.adjoint();
        Ok(Self { gain, c_r, c_hr })
    }
}

/// `ĥ = C_hr C_r⁻¹ r` with the filter `C_hr C_r⁻¹` precomputed.
#[derive(Debug, Clone)]
pub struct BussgangEstimator {
    pub linearization: BussgangLinearization,
    filter: CMatrix,
    /// Whether `C_r` needed diagonal loading.
    pub regularized: bool,
    c_h_trace: f64,
}

impl BussgangEstimator {
    pub fn new(a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd) -> Result<Self> {
        let lin = BussgangLinearization::new(a_mat, c_h, c_n)?;
        // W = C_hr C_r⁻¹  ⇔  Wᴴ = C_r⁻¹ C_hrᴴ
        let (wh, regularized) =
            solve_hermitian(lin.c_r.matrix(), &lin.c_hr.adjoint(), MAX_CONDITION, RIDGE).ok_or(Error::SingularCr)?;
        Ok(Self { filter: wh.adjoint(), linearization: lin, regularized, c_h_trace: c_h.trace() })
    }

    pub fn filter(&self) -> &CMatrix {
        &self.filter
    }

    pub fn estimate(&self, r: &QuantizedObs) -> Result<CVector> {
        self.estimate_vector(&r.to_vector())
    }

    /// Applies the filter to any vector of the observation dimension.
    pub fn estimate_vector(&self, r: &CVector) -> Result<CVector> {
        if r.len() != self.filter.ncols() {
            return Err(Error::DimensionMismatch { expected: self.filter.ncols(), found: r.len() });
        }
        Ok(&self.filter * r)
    }

    /// Analytic MSE `tr(C_h) − tr(C_hr C_r⁻¹ C_rh)`.
    pub fn mse(&self) -> f64 {
        let explained = (&self.filter * self.linearization.c_hr.adjoint()).trace().re;
        self.c_h_trace - explained
    }
}

/// One-shot Bussgang estimate.
pub fn bussgang_estimate(r: &QuantizedObs, a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd) -> Result<CVector> {
    BussgangEstimator::new(a_mat, c_h, c_n)?.estimate(r)
}

/// Closed-form `C_r⁻¹` for equidistant pilots in the noiseless scalar case,
/// where `[C_r]_{k,l} = 1 − |k−l|/M + j(k−l)/M`.
///
/// Tridiagonal `M`/`−M/2` band plus corner entries `±jM/2`; for `M = 2` the
/// neighbour and corner positions coincide and their contributions add.
pub fn cr_inverse_closed_form(m: usize) -> CMatrix {
    let mut inv = CMatrix::zeros(m, m);
    if m == 1 {
        inv[(0, 0)] = Complex64::new(1.0, 0.0);
        return inv;
    }
    let mf = m as f64;
    for k in 0..m {
        for l in 0..m {
            let dist = k.abs_diff(l);
            let mut v = Complex64::new(0.0, 0.0);
            if dist == 0 {
                v += mf;
            }
            if dist == 1 {
                v -= mf / 2.0;
            }
            if dist == m - 1 {
                v += Complex64::new(0.0, mf * (l as f64 - k as f64) / (2.0 * (mf - 1.0)));
            }
            inv[(k, l)] = v;
        }
    }
    inv
}

/// Bussgang MSE `σ²(1 − (2/π) aᴴ C_r⁻¹ a)` for equidistant pilots without
/// noise, with the quadratic form evaluated through [`cr_inverse_closed_form`].
pub fn bussgang_mse_multipilot(m: usize, sigma2: f64) -> f64 {
    let a = CVector::from_iterator(m, optimal_phases(m).into_iter().map(|p| Complex64::from_polar(1.0, p)));
    let quad = (a.adjoint() * cr_inverse_closed_form(m) * &a)[(0, 0)].re;
    sigma2 * (1.0 - 2.0 / PI * quad)
}
