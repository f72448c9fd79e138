//! The acceptance suite: twelve numerical checks with pinned tolerances,
//! seeds and runtime limits, each reported as pass or fail.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, PI};
use std::fmt;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;

use crate::bussgang::{arcsine_law, cr_inverse_closed_form, BussgangEstimator};
use crate::channel::{
    optimal_phases, pilot_vector, quantize, simulate_trials, system_matrix, CovarianceMode, PilotKind, QuantizedObs,
    SystemConfig,
};
use crate::cme::{
    boundary_angles, boundary_angles_compact, cme_general_numeric, cme_multipilot, cme_multivariate_noiseless,
    cme_noiseless_sector, cme_univariate, mse_limit, mse_multipilot_closed, mse_sector_closed,
    mse_unquantized_closed, mse_univariate_closed, CmeBudget,
};
use crate::error::Result;
use crate::gaussian::{
    mvn_orthant_prob, random_channel_covariance, sample_complex_gaussian, IntegrationBudget, OrthantSpec,
};
use crate::harness::{csv_string, run_scenario, CovSpec, EstimatorKind, Metric, ScenarioSpec, Sweep};
use crate::linalg::{CMatrix, CVector, HermitianPsd, RMatrix};
use crate::metrics::{normalized_squared_error, MetricAccumulator};
use crate::rng::stream_rng;

/// Tunable constants, exposed so that a deliberately broken value can be
/// shown to fail the suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// The `2/π` factor in `σ²(1 − (2/π) aᴴ C_r⁻¹ a)`.
    pub two_over_pi: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self { two_over_pi: FRAC_2_PI }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {} ({:.2}s, limit {}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        )
    }
}

pub const CRITERIA: [(u8, &str, u64); 12] = [
    (1, "univariate noiseless MSE", 5),
    (2, "SNR crossover", 1),
    (3, "Bussgang/CME MSE equality", 1),
    (4, "closed-form C_r inverse", 1),
    (5, "many-pilot MSE limit", 1),
    (6, "MVN orthant integration", 10),
    (7, "multivariate noiseless CME vs brute force", 60),
    (8, "importance-sampling CME", 60),
    (9, "boundary angles", 1),
    (10, "stochastic resonance", 600),
    (11, "pilot optimality", 300),
    (12, "determinism", 120),
];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Runs criterion `id` (1 to 12).
pub fn run_criterion(id: u8, opts: &ValidationOptions) -> CriterionReport {
    let &(_, title, limit) = CRITERIA.iter().find(|c| c.0 == id).expect("criterion id in 1..=12");
    let start = Instant::now();
    let result = match id {
        1 => univariate_noiseless(),
        2 => snr_crossover(),
        3 => mse_equality(opts),
        4 => closed_form_inverse(),
        5 => many_pilot_limit(),
        6 => orthant_integration(),
        7 => noiseless_vs_brute_force(),
        8 => importance_sampling(),
        9 => boundary_scan(),
        10 => stochastic_resonance(),
        11 => pilot_optimality(),
        _ => determinism(),
    };
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit);
    let (mut passed, mut detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed > limit {
        passed = false;
        detail.push_str("; runtime limit exceeded");
    }
    CriterionReport { id, title, passed, detail, elapsed, limit }
}

/// Runs all criteria in order.
pub fn run_validation(opts: &ValidationOptions) -> Vec<CriterionReport> {
    CRITERIA.iter().map(|c| run_criterion(c.0, opts)).collect()
}

/// Tolerance on the 10⁵-trial noiseless MSE.
pub const C1_TOL: f64 = 0.005;
/// Per-trial agreement of the Bussgang estimator and the CME.
pub const C1_IDENTITY_TOL: f64 = 1e-12;

fn univariate_noiseless() -> Result<Outcome> {
    let cfg = SystemConfig::new(
        1,
        1,
        f64::INFINITY,
        PilotKind::Optimal,
        CovarianceMode::Fixed(HermitianPsd::identity(1)),
        1,
    )?;
    let trials = simulate_trials(&cfg, 100_000)?;
    let buss = BussgangEstimator::new(&cfg.system_matrix(), &HermitianPsd::identity(1), &cfg.noise_cov())?;
    let mut acc = MetricAccumulator::new();
    let mut max_gap = 0.0f64;
    for t in &trials {
        let cme = CVector::from_element(1, cme_univariate(t.r.get(0), 1.0, 0.0));
        max_gap = max_gap.max((buss.estimate(&t.r)? - &cme).norm());
        acc.push(normalized_squared_error(&t.h, &cme, 1));
    }
    let expect = 1.0 - FRAC_2_PI;
    let passed = (acc.mean() - expect).abs() <= C1_TOL && max_gap <= C1_IDENTITY_TOL;
    Ok(outcome(
        passed,
        format!("nmse {:.6} ± {:.6} vs {expect:.6}; max |bussgang - cme| {max_gap:.1e}", acc.mean(), acc.stderr()),
    ))
}

/// Bisection tolerance on the crossover SNR, in dB.
pub const C2_TOL_DB: f64 = 0.01;

fn snr_crossover() -> Result<Outcome> {
    let quantized = mse_univariate_closed(1.0, 0.0);
    let gap = |db: f64| mse_unquantized_closed(1.0, 10f64.powf(-db / 10.0)) - quantized;
    let (mut lo, mut hi) = (-10.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let found = 0.5 * (lo + hi);
    let expect = 10.0 * (2.0 / (PI - 2.0)).log10();
    Ok(outcome((found - expect).abs() <= C2_TOL_DB, format!("crossing at {found:.4} dB vs {expect:.4} dB")))
}

pub const C3_TOL: f64 = 1e-10;

/// `σ²(1 − c · aᴴ C_r⁻¹ a)` with `C_r` from the arcsine law and an LU solve.
fn numeric_bussgang_mse(m: usize, sigma2: f64, two_over_pi: f64) -> Result<f64> {
    let a = pilot_vector(&PilotKind::Optimal, m)?;
    let c_r = arcsine_law(&HermitianPsd::new((&a * a.adjoint()).scale(sigma2))?)?;
    let x = c_r.matrix().clone().lu().solve(&a).ok_or(crate::Error::SingularCr)?;
    Ok(sigma2 * (1.0 - two_over_pi * a.dotc(&x).re))
}

fn mse_equality(opts: &ValidationOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for sigma2 in [1.0, 2.5] {
        for m in 1..=64 {
            let closed = mse_multipilot_closed(m, sigma2);
            worst = worst.max((closed - numeric_bussgang_mse(m, sigma2, opts.two_over_pi)?).abs());
        }
    }
    Ok(outcome(worst <= C3_TOL, format!("max |closed - numeric| {worst:.2e} over M = 1..64")))
}

pub const C4_TOL: f64 = 1e-10;

fn closed_form_inverse() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for m in 2..=64 {
        let a = pilot_vector(&PilotKind::Optimal, m)?;
        let c_r = arcsine_law(&HermitianPsd::new(&a * a.adjoint())?)?;
        worst = worst.max((cr_inverse_closed_form(m) * c_r.matrix() - CMatrix::identity(m, m)).norm());
    }
    let two = cr_inverse_closed_form(2);
    let overlap = (two[(0, 1)] - Complex64::new(-1.0, 1.0)).norm() + (two[(1, 0)] - Complex64::new(-1.0, -1.0)).norm();
    Ok(outcome(
        worst <= C4_TOL && overlap == 0.0,
        format!("max ||inv * C_r - I||_F {worst:.2e} over M = 2..64; M=2 off-diagonal {}", two[(0, 1)]),
    ))
}

pub const C5_TOL: f64 = 2e-3;

fn many_pilot_limit() -> Result<Outcome> {
    let limit = mse_limit(1.0);
    let at10 = mse_multipilot_closed(10, 1.0);
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for m in 1..=512 {
        let v = mse_multipilot_closed(m, 1.0);
        monotone &= v < prev && v > limit;
        prev = v;
    }
    Ok(outcome(
        (at10 - limit).abs() <= C5_TOL && monotone,
        format!("M=10 gap {:.2e}; strictly decreasing above the limit up to M=512: {monotone}", at10 - limit),
    ))
}

pub const C6_TOL: f64 = 1e-3;

fn orthant_integration() -> Result<Outcome> {
    let budget = IntegrationBudget::new(20_000, 6)?;
    let mut identity_ok = true;
    let mut worst_dev = 0.0f64;
    for n in 1..=6usize {
        for (i, orthant) in OrthantSpec::all(n).enumerate() {
            if i % (1 << n.saturating_sub(3)) != 0 {
                continue;
            }
            let p = mvn_orthant_prob(&vec![0.0; n], &RMatrix::identity(n, n), &orthant, &budget)?;
            let dev = (p.value - 0.5f64.powi(n as i32)).abs();
            identity_ok &= dev <= 3.0 * p.stderr + 1e-15;
            worst_dev = worst_dev.max(dev);
        }
    }
    let cov = RMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let bivariate = mvn_orthant_prob(&[0.0; 2], &cov, &OrthantSpec::positive(2), &IntegrationBudget::new(100_000, 6)?)?;
    let err = (bivariate.value - 1.0 / 3.0).abs();
    Ok(outcome(
        identity_ok && err <= C6_TOL,
        format!("identity orthants max deviation {worst_dev:.1e}; bivariate rho=0.5 {:.6} (err {err:.1e})", bivariate.value),
    ))
}

/// Per-pattern sums for the grouping oracle.
#[derive(Default, Clone)]
struct Group {
    count: f64,
    sum: Vec<Complex64>,
    sumsq: Vec<(f64, f64)>,
}

fn noiseless_vs_brute_force() -> Result<Outcome> {
    let n = 2;
    let c_h = random_channel_covariance(n, 7)?;
    let samples = sample_complex_gaussian(&c_h, 1_000_000, 70)?;
    let mut groups: BTreeMap<QuantizedObs, Group> = BTreeMap::new();
    for h in &samples {
        let g = groups.entry(quantize(h)).or_insert_with(|| Group {
            count: 0.0,
            sum: vec![Complex64::new(0.0, 0.0); n],
            sumsq: vec![(0.0, 0.0); n],
        });
        g.count += 1.0;
        for k in 0..n {
            g.sum[k] += h[k];
            g.sumsq[k].0 += h[k].re * h[k].re;
            g.sumsq[k].1 += h[k].im * h[k].im;
        }
    }
    let budget = CmeBudget::new(20_000, IntegrationBudget::new(50_000, 71)?)?;
    let mut worst = 0.0f64;
    let mut estimates = BTreeMap::new();
    for (r, g) in &groups {
        let e = cme_multivariate_noiseless(r, &c_h, &budget)?;
        for k in 0..n {
            let mean = g.sum[k] / g.count;
            let var_re = (g.sumsq[k].0 / g.count - mean.re * mean.re) / (g.count - 1.0);
            let var_im = (g.sumsq[k].1 / g.count - mean.im * mean.im) / (g.count - 1.0);
            let se = (var_re + var_im + e.stderr[k].re.powi(2) + e.stderr[k].im.powi(2)).sqrt();
            worst = worst.max((e.estimate[k] - mean).norm() / se);
        }
        estimates.insert(r.clone(), e.estimate);
    }
    // MSE comparison on fresh trials
    let cfg = SystemConfig::new(n, 1, f64::INFINITY, PilotKind::Optimal, CovarianceMode::Fixed(c_h.clone()), 72)?;
    let trials = simulate_trials(&cfg, 10_000)?;
    let buss = BussgangEstimator::new(&cfg.system_matrix(), &c_h, &cfg.noise_cov())?;
    let mut cme_acc = MetricAccumulator::new();
    let mut buss_acc = MetricAccumulator::new();
    for t in &trials {
        let e = match estimates.get(&t.r) {
            Some(e) => e.clone(),
            None => cme_multivariate_noiseless(&t.r, &c_h, &budget)?.estimate,
        };
        cme_acc.push(normalized_squared_error(&t.h, &e, n));
        buss_acc.push(normalized_squared_error(&t.h, &buss.estimate(&t.r)?, n));
    }
    let slack = 3.0 * (cme_acc.stderr().powi(2) + buss_acc.stderr().powi(2)).sqrt();
    let passed = worst <= 3.0 && cme_acc.mean() <= buss_acc.mean() + slack;
    Ok(outcome(
        passed,
        format!(
            "{} patterns, worst deviation {worst:.2} combined stderr; nmse cme {:.4} vs bussgang {:.4}",
            groups.len(),
            cme_acc.mean(),
            buss_acc.mean()
        ),
    ))
}

fn importance_sampling() -> Result<Outcome> {
    let budget = CmeBudget::new(20_000, IntegrationBudget::new(20_000, 80)?)?;
    let mut worst = 0.0f64;
    let deviation = |est: Complex64, se: Complex64, expect: Complex64| (est - expect).norm() / se.norm();
    // N = M = 1 at 0 dB
    let a = CMatrix::identity(1, 1);
    for l in 0..4u8 {
        let r = QuantizedObs::from_labels(&[l])?;
        let e = cme_general_numeric(&r, &a, &HermitianPsd::identity(1), &HermitianPsd::identity(1), &budget.with_seed(81 + l as u64))?;
        worst = worst.max(deviation(e.estimate[0], e.stderr[0], cme_univariate(r.get(0), 1.0, 1.0)));
    }
    // N = 1, M = 2, nearly noiseless
    let psi = optimal_phases(2);
    let a = system_matrix(&pilot_vector(&PilotKind::Optimal, 2)?, 1);
    let c_n = HermitianPsd::scaled_identity(2, 1e-6)?;
    let mut patterns = 0;
    for l0 in 0..4u8 {
        for k in 1..=2 {
            let labels: Vec<u8> = (0..2).map(|i| if i < k { l0 } else { (l0 + 1) % 4 }).collect();
            let r = QuantizedObs::from_labels(&labels)?;
            debug_assert!(boundary_angles(&r, &psi)?.consistent);
            let e = cme_general_numeric(&r, &a, &HermitianPsd::identity(1), &c_n, &budget.with_seed(90 + patterns))?;
            worst = worst.max(deviation(e.estimate[0], e.stderr[0], cme_multipilot(&r, 2, 1.0)?));
            patterns += 1;
        }
    }
    Ok(outcome(worst <= 3.0, format!("worst deviation {worst:.2} stderr over 4 + {patterns} observations")))
}

pub const C9_TOL: f64 = 1e-12;

fn boundary_scan() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for m in 1..=16usize {
        let psi = optimal_phases(m);
        for l0 in 0..4u8 {
            for k in 1..=m {
                let labels: Vec<u8> = (0..m).map(|i| if i < k { l0 } else { (l0 + 1) % 4 }).collect();
                let r = QuantizedObs::from_labels(&labels)?;
                let d = boundary_angles(&r, &psi)?.phi_low - boundary_angles_compact(&r);
                worst = worst.max(((d + PI).rem_euclid(2.0 * PI) - PI).abs());
                count += 1;
            }
        }
    }
    Ok(outcome(worst <= C9_TOL, format!("{count} patterns, max difference {worst:.1e} rad")))
}

/// Importance-sampling budget for the stochastic-resonance sweep.
pub const C10_PRIOR_SAMPLES: usize = 4000;

fn stochastic_resonance() -> Result<Outcome> {
    let mut spec = ScenarioSpec::new(
        "resonance",
        Sweep::SnrDb(vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]),
        vec![EstimatorKind::CmeNumeric],
    );
    spec.m = 10;
    spec.trials = 10_000;
    spec.metrics = vec![Metric::Nmse];
    spec.budget = CmeBudget::new(C10_PRIOR_SAMPLES, IntegrationBudget::new(C10_PRIOR_SAMPLES, 100)?)?;
    spec.seed = 100;
    let out = run_scenario(&spec)?;
    if let Some(e) = out.errors.first() {
        return Ok(outcome(false, e.to_string()));
    }
    let best = out
        .rows
        .iter()
        .filter(|r| r.estimator == "cme_numeric")
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("one row per SNR");
    let limit = mse_limit(1.0);
    Ok(outcome(
        best.value + 3.0 * best.stderr < limit,
        format!("min nmse {:.4} ± {:.4} at {} dB vs limit {limit:.4}", best.value, best.stderr, best.snr_db),
    ))
}

fn pilot_optimality() -> Result<Outcome> {
    let trials = 10_000;
    let hs = sample_complex_gaussian(&HermitianPsd::identity(1), trials, 110)?;
    let mc_mse = |psi: &[f64]| -> Result<MetricAccumulator> {
        hs.iter()
            .map(|h| {
                let y = CVector::from_iterator(psi.len(), psi.iter().map(|p| h[0] * Complex64::from_polar(1.0, *p)));
                let est = cme_noiseless_sector(&quantize(&y), psi, 1.0)?;
                Ok((h[0] - est).norm_sqr())
            })
            .collect::<Result<Vec<f64>>>()
            .map(|v| v.into_iter().collect())
    };
    let optimal = mc_mse(&optimal_phases(3))?;
    let mut rng = stream_rng(111, 0);
    let mut worst_margin = f64::INFINITY;
    let mut passed = true;
    for _ in 0..20 {
        let mut p = [rng.random_range(0.0..FRAC_PI_2), rng.random_range(0.0..FRAC_PI_2)];
        p.sort_by(f64::total_cmp);
        let psi = [0.0, p[0], p[1]];
        let other = mc_mse(&psi)?;
        let slack = 3.0 * (optimal.stderr().powi(2) + other.stderr().powi(2)).sqrt();
        let margin = other.mean() + slack - optimal.mean();
        passed &= margin >= 0.0;
        // the exact sector MSE must agree with the ordering too
        passed &= mse_sector_closed(&psi, 1.0) >= mse_sector_closed(&optimal_phases(3), 1.0) - 1e-12;
        worst_margin = worst_margin.min(margin);
    }
    Ok(outcome(
        passed,
        format!("equidistant nmse {:.4} ± {:.4}; smallest margin {worst_margin:.4}", optimal.mean(), optimal.stderr()),
    ))
}

fn determinism() -> Result<Outcome> {
    let mut fixed = ScenarioSpec::new(
        "det",
        Sweep::SnrDb(vec![0.0, 10.0]),
        vec![EstimatorKind::Bussgang, EstimatorKind::CmeNumeric, EstimatorKind::UnquantizedLmmse],
    );
    fixed.n = 2;
    fixed.m = 2;
    fixed.trials = 300;
    fixed.budget = CmeBudget::new(1000, IntegrationBudget::new(1000, 120)?)?;
    fixed.seed = 120;
    let mut per_trial = fixed.clone();
    per_trial.name = "det_pt".into();
    per_trial.cov_mode = CovSpec::PerTrial;
    per_trial.sweep = Sweep::Dim(vec![2, 3]);
    per_trial.m = 1;
    per_trial.snr_db = f64::INFINITY;
    per_trial.estimators = vec![EstimatorKind::Bussgang, EstimatorKind::CmeNoiseless];
    let render = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        pool.install(|| {
            let a = run_scenario(&fixed)?;
            let b = run_scenario(&per_trial)?;
            Ok(csv_string(&a.rows) + &csv_string(&b.rows))
        })
    };
    let one = render(1)?;
    let four = render(4)?;
    let again = render(3)?;
    Ok(outcome(
        one == four && one == again && one.lines().count() > 10,
        format!("{} bytes identical across 1, 3 and 4 threads: {}", one.len(), one == four && one == again),
    ))
}
