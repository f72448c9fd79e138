//! Scenario-level properties of the estimators, checked by Monte Carlo.

use num_complex::Complex64;
use onebit_core::channel::quantize;
use onebit_core::cme::{cme_general_numeric, CmeBudget};
use onebit_core::gaussian::{sample_complex_gaussian, standard_complex_normal, IntegrationBudget};
use onebit_core::harness::{run_cdf, run_scenario, CovSpec, EstimatorKind, Metric, ScenarioSpec, Sweep, SweepRow};
use onebit_core::linalg::{CMatrix, CVector, HermitianPsd};
use onebit_core::metrics::{normalized_squared_error, MetricAccumulator};
use onebit_core::rng::stream_rng;

fn budget(samples: usize) -> CmeBudget {
    CmeBudget::new(samples, IntegrationBudget::new(samples, 5).unwrap()).unwrap()
}

fn find<'a>(rows: &'a [SweepRow], estimator: &str, metric: &str, pred: impl Fn(&SweepRow) -> bool) -> &'a SweepRow {
    rows.iter()
        .find(|r| r.estimator == estimator && r.metric_name == metric && pred(r))
        .unwrap_or_else(|| panic!("no {estimator}/{metric} row"))
}

#[test]
fn numeric_cme_is_not_worse_than_bussgang() {
    let mut spec = ScenarioSpec::new(
        "mse_opt",
        Sweep::SnrDb(vec![0.0, 10.0]),
        vec![EstimatorKind::CmeNumeric, EstimatorKind::Bussgang],
    );
    spec.n = 2;
    spec.m = 2;
    spec.trials = 1000;
    spec.metrics = vec![Metric::Nmse];
    spec.budget = budget(4000);
    spec.seed = 21;
    let out = run_scenario(&spec).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    for snr in [0.0, 10.0] {
        let cme = find(&out.rows, "cme_numeric", "nmse", |r| r.snr_db == snr);
        let buss = find(&out.rows, "bussgang", "nmse", |r| r.snr_db == snr);
        let slack = 3.0 * (cme.stderr.powi(2) + buss.stderr.powi(2)).sqrt();
        assert!(cme.value <= buss.value + slack, "{snr} dB: {} vs {}", cme.value, buss.value);
    }
}

#[test]
fn cme_gap_to_bussgang_grows_with_pilots() {
    let mut spec = ScenarioSpec::new(
        "pilots",
        Sweep::Pilots(vec![1, 4, 8]),
        vec![EstimatorKind::CmeNumeric, EstimatorKind::Bussgang],
    );
    spec.snr_db = 10.0;
    spec.trials = 2000;
    spec.metrics = vec![Metric::Nmse];
    spec.budget = budget(4000);
    spec.seed = 22;
    let out = run_scenario(&spec).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    let gap = |m: usize| {
        find(&out.rows, "bussgang", "nmse", |r| r.m == m).value - find(&out.rows, "cme_numeric", "nmse", |r| r.m == m).value
    };
    // a single pilot: the scalar Bussgang estimator is already the CME
    let one = find(&out.rows, "cme_numeric", "nmse", |r| r.m == 1);
    assert!(gap(1).abs() <= 3.0 * one.stderr);
    assert!(gap(8) > gap(4) && gap(4) > 0.0, "gaps {} {} {}", gap(1), gap(4), gap(8));
}

#[test]
fn rate_bounds_behave_as_expected() {
    let mut single = ScenarioSpec::new("rate1", Sweep::Dim(vec![1]), vec![EstimatorKind::CmeClosed]);
    single.trials = 2000;
    single.metrics = vec![Metric::Rate];
    let out = run_scenario(&single).unwrap();
    let r = find(&out.rows, "cme_closed", "rate", |_| true);
    assert!(r.value > 0.0 && r.value < 1.1, "{}", r.value);

    let mut four = ScenarioSpec::new(
        "rate4",
        Sweep::Dim(vec![4]),
        vec![EstimatorKind::CmeNoiseless, EstimatorKind::Bussgang],
    );
    four.trials = 1000;
    four.metrics = vec![Metric::Rate];
    four.budget = budget(5000);
    let out = run_scenario(&four).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    let cme = find(&out.rows, "cme_noiseless", "rate", |_| true).value;
    let buss = find(&out.rows, "bussgang", "rate", |_| true).value;
    assert!(cme > 1.0 && cme < 4.0 && buss > 1.0 && buss < 4.0, "{cme} {buss}");
    assert!((cme - buss).abs() < 0.1 * cme.min(buss), "{cme} {buss}");
}

#[test]
fn cdf_of_cme_sits_left_of_bussgang_near_the_median() {
    let mut spec = ScenarioSpec::new(
        "cdf",
        Sweep::Dim(vec![4]),
        vec![EstimatorKind::CmeNoiseless, EstimatorKind::Bussgang],
    );
    spec.trials = 2000;
    spec.budget = budget(5000);
    spec.seed = 23;
    let out = run_cdf(&spec).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    let median = |e: &str| find(&out.rows, e, "q0.50", |_| true).value;
    assert!(median("cme_noiseless") <= median("bussgang") * 1.02, "{} {}", median("cme_noiseless"), median("bussgang"));
}

#[test]
fn numeric_cme_is_equivariant_under_pilot_rotation() {
    let trials = 600;
    let eta2 = 0.5;
    let c_h = HermitianPsd::identity(1);
    let c_n = HermitianPsd::scaled_identity(2, eta2).unwrap();
    let hs = sample_complex_gaussian(&c_h, trials, 30).unwrap();
    let mse_for = |phase: f64| {
        let rot = Complex64::from_polar(1.0, phase);
        let a = CMatrix::from_column_slice(2, 1, &[rot, rot * Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4)]);
        let mut rng = stream_rng(31, 0);
        let acc: MetricAccumulator = hs
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let noise = CVector::from_fn(2, |_, _| standard_complex_normal(&mut rng) * eta2.sqrt());
                let r = quantize(&(&a * h + noise));
                let e = cme_general_numeric(&r, &a, &c_h, &c_n, &budget(2000).with_seed(i as u64)).unwrap();
                normalized_squared_error(h, &e.estimate, 1)
            })
            .collect();
        acc
    };
    let base = mse_for(0.0);
    let rotated = mse_for(1.1);
    let slack = 3.0 * (base.stderr().powi(2) + rotated.stderr().powi(2)).sqrt();
    assert!((base.mean() - rotated.mean()).abs() <= slack, "{} vs {}", base.mean(), rotated.mean());
}

#[test]
fn per_trial_and_fixed_modes_both_normalize_power() {
    for cov_mode in [CovSpec::Fixed, CovSpec::PerTrial] {
        let mut spec = ScenarioSpec::new("zero", Sweep::Dim(vec![3]), vec![EstimatorKind::Bussgang]);
        spec.cov_mode = cov_mode;
        spec.trials = 4000;
        spec.snr_db = 0.0;
        spec.metrics = vec![Metric::Nmse];
        let out = run_scenario(&spec).unwrap();
        let r = find(&out.rows, "bussgang", "nmse", |_| true);
        assert!(r.value > 0.0 && r.value < 1.0);
    }
}
