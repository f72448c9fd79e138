//! The one-bit observation model `r = Q(A h + n)` with `A = a ⊗ I_N`.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{random_channel_covariance, sample_with_factor, standard_complex_normal};
use crate::linalg::{psd_factor, CMatrix, CVector, HermitianPsd};
use crate::rng::{derive_seed, stream_rng};

/// Pilot sequence family.
#[derive(Debug, Clone, PartialEq)]
pub enum PilotKind {
    /// Equidistant phases `π(k−1)/(2M)`.
    Optimal,
    /// `a = 1`.
    AllOnes,
    /// Explicit phases in `[0, π/2)`, strictly increasing, starting at 0.
    Explicit(Vec<f64>),
}

impl PilotKind {
    /// Phase sequence of length `m`.
    pub fn phases(&self, m: usize) -> Result<Vec<f64>> {
        if m == 0 {
            return Err(Error::InvalidArgument("pilot count must be positive".into()));
        }
        match self {
            PilotKind::Optimal => Ok(optimal_phases(m)),
            PilotKind::AllOnes => Ok(vec![0.0; m]),
            PilotKind::Explicit(phases) => {
                validate_phases(phases)?;
                if phases.len() != m {
                    return Err(Error::InvalidPhases(format!("{} phases for {m} pilots", phases.len())));
                }
                Ok(phases.clone())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PilotKind::Optimal => "optimal",
            PilotKind::AllOnes => "ones",
            PilotKind::Explicit(_) => "explicit",
        }
    }
}

impl fmt::Display for PilotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn optimal_phases(m: usize) -> Vec<f64> {
    (0..m).map(|k| FRAC_PI_2 * k as f64 / m as f64).collect()
}

/// Checks the explicit-sequence contract: first phase 0, strictly
/// increasing, all in `[0, π/2)`.
pub fn validate_phases(phases: &[f64]) -> Result<()> {
    match phases.first() {
        None => return Err(Error::InvalidPhases("empty sequence".into())),
        Some(&p) if p != 0.0 => return Err(Error::InvalidPhases(format!("first phase {p} is not 0"))),
        _ => {}
    }
    if let Some(p) = phases.iter().find(|p| !(0.0..FRAC_PI_2).contains(*p)) {
        return Err(Error::InvalidPhases(format!("phase {p} outside [0, pi/2)")));
    }
    if phases.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidPhases("phases not strictly increasing".into()));
    }
    Ok(())
}

/// Unit-modulus pilot vector `[a]_k = exp(j ψ_k)`, so `‖a‖² = m`.
pub fn pilot_vector(kind: &PilotKind, m: usize) -> Result<CVector> {
    let phases = kind.phases(m)?;
    Ok(CVector::from_iterator(m, phases.iter().map(|&p| Complex64::from_polar(1.0, p))))
}

/// `a ⊗ I_n`, an `(M n) × n` matrix.
pub fn system_matrix(a: &CVector, n: usize) -> CMatrix {
    let m = a.len();
    CMatrix::from_fn(m * n, n, |row, col| if row % n == col { a[row / n] } else { Complex64::new(0.0, 0.0) })
}

/// `η² = 10^(−SNR/10)`; an infinite SNR is the noiseless model.
pub fn noise_var_from_snr(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// A quantized observation: entries `(±1 ± j)/√2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantizedObs {
    /// Stacked signs `[sign Re; sign Im]`, length `2L`.
    signs: Vec<i8>,
}

fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Element-wise `(sign(Re y) + j sign(Im y)) / √2` with `sign(0) = +1`.
pub fn quantize(y: &CVector) -> QuantizedObs {
    let mut signs: Vec<i8> = y.iter().map(|z| sign(z.re)).collect();
    signs.extend(y.iter().map(|z| sign(z.im)));
    QuantizedObs { signs }
}

impl QuantizedObs {
    /// From separate real- and imaginary-part signs.
    pub fn from_signs(re: &[i8], im: &[i8]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::DimensionMismatch { expected: re.len(), found: im.len() });
        }
        if re.iter().chain(im).any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("signs must be +1 or -1".into()));
        }
        let mut signs = re.to_vec();
        signs.extend_from_slice(im);
        Ok(Self { signs })
    }

    /// From quadrant labels 0..4 (`q₁ = (1+j)/√2` is label 0, counter-clockwise).
    pub fn from_labels(labels: &[u8]) -> Result<Self> {
        let mut re = Vec::with_capacity(labels.len());
        let mut im = Vec::with_capacity(labels.len());
        for &l in labels {
            let (r, i) = match l {
                0 => (1, 1),
                1 => (-1, 1),
                2 => (-1, -1),
                3 => (1, -1),
                _ => return Err(Error::InvalidArgument(format!("quadrant label {l}"))),
            };
            re.push(r);
            im.push(i);
        }
        Self::from_signs(&re, &im)
    }

    pub fn len(&self) -> usize {
        self.signs.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Stacked real signs `[Re; Im]`.
    pub fn real_signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn get(&self, k: usize) -> Complex64 {
        let n = self.len();
        Complex64::new(self.signs[k] as f64, self.signs[n + k] as f64) * FRAC_1_SQRT_2
    }

    pub fn to_vector(&self) -> CVector {
        CVector::from_fn(self.len(), |k, _| self.get(k))
    }

    /// Quadrant label of entry `k`, 0..4 counter-clockwise from the first quadrant.
    pub fn label(&self, k: usize) -> u8 {
        let n = self.len();
        match (self.signs[k], self.signs[n + k]) {
            (1, 1) => 0,
            (-1, 1) => 1,
            (-1, -1) => 2,
            _ => 3,
        }
    }

    /// `∠(r_k)` in `[0, 2π)`.
    pub fn angle(&self, k: usize) -> f64 {
        FRAC_PI_4 + FRAC_PI_2 * self.label(k) as f64
    }
}

/// How the channel covariance is chosen for each trial.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceMode {
    /// One covariance for every trial.
    Fixed(HermitianPsd),
    /// A fresh random covariance per trial, drawn from the trial seed.
    PerTrial,
}

/// A complete scenario description.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n: usize,
    pub m: usize,
    pub snr_db: f64,
    pub pilot: PilotKind,
    pub cov: CovarianceMode,
    pub seed: u64,
}

impl SystemConfig {
    pub fn new(n: usize, m: usize, snr_db: f64, pilot: PilotKind, cov: CovarianceMode, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("N and M must be positive".into()));
        }
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("SNR {snr_db} dB")));
        }
        pilot.phases(m)?;
        if let CovarianceMode::Fixed(c) = &cov {
            if c.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, found: c.dim() });
            }
            if (c.trace() - n as f64).abs() > 1e-8 * n as f64 {
                return Err(Error::InvalidArgument(format!("channel covariance trace {} != {n}", c.trace())));
            }
        }
        Ok(Self { n, m, snr_db, pilot, cov, seed })
    }

    pub fn noise_var(&self) -> f64 {
        noise_var_from_snr(self.snr_db)
    }

    pub fn pilot_vector(&self) -> CVector {
        pilot_vector(&self.pilot, self.m).expect("validated at construction")
    }

    pub fn system_matrix(&self) -> CMatrix {
        system_matrix(&self.pilot_vector(), self.n)
    }

    /// `η² I` of size `M N`.
    pub fn noise_cov(&self) -> HermitianPsd {
        HermitianPsd::scaled_identity(self.m * self.n, self.noise_var()).expect("nonnegative variance")
    }

    /// Covariance used by trial `index`.
    pub fn channel_cov(&self, index: u64) -> Result<HermitianPsd> {
        match &self.cov {
            CovarianceMode::Fixed(c) => Ok(c.clone()),
            CovarianceMode::PerTrial => random_channel_covariance(self.n, derive_seed(self.seed, index) ^ COV_TAG),
        }
    }
}

const COV_TAG: u64 = 0xC0F_u64 << 48;

/// One simulated channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: u64,
    pub h: CVector,
    /// Unquantized receive signal `A h + n`.
    pub y: CVector,
    pub r: QuantizedObs,
    pub channel_cov: Arc<HermitianPsd>,
}

/// `count` trials; trial `i` depends only on `(cfg.seed, i)`.
pub fn simulate_trials(cfg: &SystemConfig, count: usize) -> Result<Vec<Trial>> {
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let a_mat = cfg.system_matrix();
    let eta = cfg.noise_var().sqrt();
    let fixed = match &cfg.cov {
        CovarianceMode::Fixed(c) => Some((Arc::new(c.clone()), psd_factor(c))),
        CovarianceMode::PerTrial => None,
    };
    (0..count as u64)
        .into_par_iter()
        .map(|index| {
            let (cov, factor) = match &fixed {
                Some((c, l)) => (Arc::clone(c), l.clone()),
                None => {
                    let c = cfg.channel_cov(index)?;
                    let l = psd_factor(&c);
                    (Arc::new(c), l)
                }
            };
            let mut rng = stream_rng(cfg.seed, index);
            let h = sample_with_factor(&factor, &mut rng);
            let mut y = &a_mat * &h;
            if eta > 0.0 {
                for v in y.iter_mut() {
                    *v += standard_complex_normal(&mut rng) * eta;
                }
            }
            let r = quantize(&y);
            Ok(Trial { index, h, y, r, channel_cov: cov })
        })
        .collect()
}
