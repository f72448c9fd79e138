//! Complex matrix helpers, validated Hermitian PSD covariances, Cholesky
//! factorization, the real-stacked covariance representation and the scalar
//! special functions used by the estimators.
//!
//! Vectors and matrices are plain `nalgebra` containers over [`Complex64`];
//! the only newtype is [`HermitianPsd`], which carries the validation that
//! every covariance in this crate relies on.

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;
pub type RVector = DVector<f64>;
pub type RMatrix = DMatrix<f64>;

/// Maximum tolerated conjugate asymmetry, relative to `max(1, trace / n)`.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Most negative tolerated eigenvalue, relative to `max(1, trace / n)`.
pub const PSD_TOL: f64 = 1e-10;
/// Diagonal ridge added before Cholesky, relative to `trace / n`.
pub const CHOLESKY_RIDGE: f64 = 1e-12;
/// Smallest accepted Cholesky pivot, relative to `trace / n`. Sits an order of
/// magnitude below the ridge so exactly singular PSD inputs still factor.
pub const CHOLESKY_PIVOT_FLOOR: f64 = 1e-13;

/// A complex Hermitian positive-semidefinite matrix.
///
/// Construction checks squareness, finiteness, conjugate symmetry and the
/// eigenvalue lower bound; the stored matrix is the exactly symmetrized input.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianPsd(CMatrix);

impl HermitianPsd {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        let (rows, cols) = matrix.shape();
        if rows != cols || rows == 0 {
            return Err(Error::NotSquare { rows, cols });
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = magnitude_scale(&matrix);
        let asym = (&matrix - matrix.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if asym > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(asym));
        }
        let sym = (&matrix + matrix.adjoint()).scale(0.5);
        let min_eig = SymmetricEigen::new(sym.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL * scale {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(Self(sym))
    }

    /// Builds from a real symmetric matrix.
    pub fn from_real(matrix: &RMatrix) -> Result<Self> {
        Self::new(matrix.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn identity(n: usize) -> Self {
        Self(CMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, value: f64) -> Result<Self> {
        Self::diagonal(&vec![value; n])
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let d = CVector::from_iterator(values.len(), values.iter().map(|&v| Complex64::new(v, 0.0)));
        Self::new(CMatrix::from_diagonal(&d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        self.0.diagonal().iter().map(|z| z.re).collect()
    }

    /// Multiplies by a nonnegative real factor.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::InvalidArgument(format!("scale factor {factor}")));
        }
        Ok(Self(self.0.scale(factor)))
    }

    /// True when every off-diagonal entry is exactly zero.
    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == Complex64::new(0.0, 0.0)))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

fn magnitude_scale<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr: f64 = m.diagonal().iter().map(|z| z.clone().real()).sum();
    (tr / n).abs().max(1.0)
}

fn ridge_scale<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr: f64 = m.diagonal().iter().map(|z| z.clone().real()).sum();
    (tr / n).max(0.0)
}

/// Lower-triangular Cholesky factor with a small trace-relative ridge.
///
/// Works for both real symmetric and complex Hermitian input; only the lower
/// triangle is read.
pub fn cholesky_lower<T>(a: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let n = rows;
    let scale = ridge_scale(a);
    let ridge = CHOLESKY_RIDGE * scale;
    let floor = CHOLESKY_PIVOT_FLOOR * scale;
    let mut l = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)].real() + ridge;
        for k in 0..j {
            pivot -= l[(j, k)].modulus_squared();
        }
        if !(pivot > floor) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = T::from_real(d);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conjugate();
            }
            l[(i, j)] = s.unscale(d);
        }
    }
    Ok(l)
}

/// Cholesky factor of a validated Hermitian PSD matrix.
pub fn cholesky(c: &HermitianPsd) -> Result<CMatrix> {
    cholesky_lower(c.matrix())
}

/// Square-root factor `L` with `L Lᴴ = C` that tolerates singular PSD input:
/// columns whose pivot falls below the floor are zeroed instead of failing.
pub fn psd_factor(c: &HermitianPsd) -> CMatrix {
    let a = c.matrix();
    let n = a.nrows();
    let floor = CHOLESKY_PIVOT_FLOOR * ridge_scale(a);
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)].re;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if pivot <= floor {
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = Complex64::new(d, 0.0);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / d;
        }
    }
    l
}

/// `[[Re C, −Im C], [Im C, Re C]]`.
///
/// A circularly symmetric `h ~ N_C(0, C)` stacked as `[Re h; Im h]` has
/// covariance one half of this matrix; callers apply the halving.
pub fn real_stack_cov(c: &HermitianPsd) -> RMatrix {
    let n = c.dim();
    let m = c.matrix();
    RMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let z = m[(i % n, j % n)];
        match (i < n, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// `[Re v; Im v]`.
pub fn stack_real(v: &CVector) -> RVector {
    let n = v.len();
    RVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Inverse of [`stack_real`].
pub fn unstack_real(x: &[f64]) -> CVector {
    let n = x.len() / 2;
    CVector::from_fn(n, |i, _| Complex64::new(x[i], x[n + i]))
}

/// Solves the Hermitian system `C X = B`, adding a `ridge · trace / n`
/// diagonal loading when the spectral condition number exceeds `max_cond`.
///
/// Returns the solution and whether regularization was applied, or `None`
/// when the (possibly regularized) system is still singular.
pub fn solve_hermitian(c: &CMatrix, b: &CMatrix, max_cond: f64, ridge: f64) -> Option<(CMatrix, bool)> {
    let n = c.nrows();
    let eig = SymmetricEigen::new((c + c.adjoint()).scale(0.5)).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let ill = !(min > 0.0) || max / min > max_cond;
    let mut sys = c.clone();
    if ill {
        let tr: f64 = c.diagonal().iter().map(|z| z.re).sum();
        let load = ridge * (tr / n as f64).abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            sys[(i, i)] += Complex64::new(load, 0.0);
        }
    }
    let x = sys.lu().solve(b)?;
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some((x, ill))
}

/// Gauss error function, accurate to about 1e-15.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile for `p` in `(0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn rel_frobenius<T: ComplexField<RealField = f64>>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}
