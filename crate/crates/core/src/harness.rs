//! Monte-Carlo scenario runner, CSV output and the scenario config format.
//!
//! A scenario sweeps one of SNR, antenna count or pilot count and evaluates a
//! set of estimators on the same simulated trials at every sweep point. All
//! randomness is keyed by the scenario seed and the trial or pattern index,
//! and rows are emitted in a fixed order, so output bytes do not depend on the
//! number of threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bussgang::{BussgangEstimator, MAX_CONDITION, RIDGE};
use crate::channel::{simulate_trials, CovarianceMode, PilotKind, QuantizedObs, SystemConfig, Trial};
use crate::cme::{
    cme_multivariate_noiseless, cme_noiseless_sector, cme_univariate, mse_sector_closed, mse_univariate_closed,
    CmeBudget, ImportanceSampler,
};
use crate::error::{Error, Result};
use crate::gaussian::{random_channel_covariance, IntegrationBudget};
use crate::linalg::{solve_hermitian, CMatrix, CVector, HermitianPsd};
use crate::metrics::{cosine_similarity, data_model, normalized_squared_error, rate_term, MetricAccumulator};
use crate::rng::derive_seed;

/// Smallest admissible trial count.
pub const MIN_TRIALS: usize = 100;

pub const CSV_HEADER: &str = "scenario,estimator,N,M,snr_db,pilot,trials,seed,metric_name,value,stderr";

const FIXED_COV_TAG: u64 = 0xF1CE_D000;
const ESTIMATOR_TAG: u64 = 0xE571_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Bussgang,
    CmeClosed,
    CmeNumeric,
    CmeNoiseless,
    UnquantizedLmmse,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Bussgang,
        EstimatorKind::CmeClosed,
        EstimatorKind::CmeNumeric,
        EstimatorKind::CmeNoiseless,
        EstimatorKind::UnquantizedLmmse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Bussgang => "bussgang",
            EstimatorKind::CmeClosed => "cme_closed",
            EstimatorKind::CmeNumeric => "cme_numeric",
            EstimatorKind::CmeNoiseless => "cme_noiseless",
            EstimatorKind::UnquantizedLmmse => "unquantized_lmmse",
        }
    }

    fn is_cme(&self) -> bool {
        matches!(self, EstimatorKind::CmeClosed | EstimatorKind::CmeNumeric | EstimatorKind::CmeNoiseless)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>> {
    split_list(s).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Nmse,
    Cosine,
    Rate,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Nmse, Metric::Cosine, Metric::Rate];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::Cosine => "cosine",
            Metric::Rate => "rate",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric '{s}'")))
    }
}

/// The swept parameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    SnrDb(Vec<f64>),
    Dim(Vec<usize>),
    Pilots(Vec<usize>),
}

impl Sweep {
    pub fn kind(&self) -> &'static str {
        match self {
            Sweep::SnrDb(_) => "snr_db",
            Sweep::Dim(_) => "dim",
            Sweep::Pilots(_) => "pilots",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::SnrDb(v) => v.len(),
            Sweep::Dim(v) => v.len(),
            Sweep::Pilots(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `values` as a sweep of the given kind.
    pub fn parse(kind: &str, values: &str) -> Result<Self> {
        match kind {
            "snr_db" => Ok(Sweep::SnrDb(split_list(values).map(parse_value).collect::<Result<_>>()?)),
            "dim" => Ok(Sweep::Dim(split_list(values).map(parse_value).collect::<Result<_>>()?)),
            "pilots" => Ok(Sweep::Pilots(split_list(values).map(parse_value).collect::<Result<_>>()?)),
            _ => Err(Error::InvalidArgument(format!("unknown sweep '{kind}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovSpec {
    /// One random covariance per antenna count, drawn from the scenario seed.
    Fixed,
    PerTrial,
}

impl FromStr for CovSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(CovSpec::Fixed),
            "per_trial" => Ok(CovSpec::PerTrial),
            _ => Err(Error::InvalidArgument(format!("unknown cov_mode '{s}'"))),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub sweep: Sweep,
    /// Antenna count when not swept.
    pub n: usize,
    /// Pilot count when not swept.
    pub m: usize,
    /// SNR in dB when not swept; `inf` is noiseless.
    pub snr_db: f64,
    pub estimators: Vec<EstimatorKind>,
    pub metrics: Vec<Metric>,
    pub trials: usize,
    pub budget: CmeBudget,
    pub cov_mode: CovSpec,
    pub pilot: PilotKind,
    pub seed: u64,
}

impl ScenarioSpec {
    /// A single-point scenario with every metric enabled.
    pub fn new(name: &str, sweep: Sweep, estimators: Vec<EstimatorKind>) -> Self {
        Self {
            name: name.to_string(),
            sweep,
            n: 1,
            m: 1,
            snr_db: f64::INFINITY,
            estimators,
            metrics: Metric::ALL.to_vec(),
            trials: 10_000,
            budget: CmeBudget::default(),
            cov_mode: CovSpec::Fixed,
            pilot: PilotKind::Optimal,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::InvalidArgument("empty sweep".into()));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::InvalidArgument(format!("trials {} < {MIN_TRIALS}", self.trials)));
        }
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(Error::InvalidArgument(format!("invalid scenario name '{}'", self.name)));
        }
        for (n, m, snr) in self.points() {
            SystemConfig::new(n, m, snr, self.pilot.clone(), CovarianceMode::PerTrial, self.seed)?;
        }
        Ok(())
    }

    /// `(N, M, snr_db)` for every sweep point, in sweep order.
    pub fn points(&self) -> Vec<(usize, usize, f64)> {
        match &self.sweep {
            Sweep::SnrDb(v) => v.iter().map(|&s| (self.n, self.m, s)).collect(),
            Sweep::Dim(v) => v.iter().map(|&n| (n, self.m, self.snr_db)).collect(),
            Sweep::Pilots(v) => v.iter().map(|&m| (self.n, m, self.snr_db)).collect(),
        }
    }
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub m: usize,
    pub snr_db: f64,
    pub pilot: String,
    pub trials: usize,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
    pub stderr: f64,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.estimator,
            self.n,
            self.m,
            self.snr_db,
            self.pilot,
            self.trials,
            self.seed,
            self.metric_name,
            self.value,
            self.stderr
        )
    }
}

/// A failure confined to one estimator at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub m: usize,
    pub snr_db: f64,
    pub error: Error,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{} N={} M={} snr_db={}]: {}",
            self.scenario, self.estimator, self.n, self.m, self.snr_db, self.error
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOutput {
    pub rows: Vec<SweepRow>,
    pub errors: Vec<RowError>,
}

impl ScenarioOutput {
    pub fn extend(&mut self, other: ScenarioOutput) {
        self.rows.extend(other.rows);
        self.errors.extend(other.errors);
    }
}

/// Writes the header and all rows with `\n` line endings.
pub fn write_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv())?;
    }
    Ok(())
}

pub fn csv_string(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("rows are UTF-8")
}

/// An estimator bound to one channel covariance.
enum Prepared {
    Bussgang(Box<BussgangEstimator>),
    Lmmse(CMatrix),
    Univariate { sigma2: Vec<f64>, eta2: f64 },
    Sector { psi: Vec<f64>, sigma: f64 },
    Numeric(Box<ImportanceSampler>),
    Noiseless { c_h: Arc<HermitianPsd>, budget: CmeBudget },
}

impl Prepared {
    fn new(kind: EstimatorKind, cfg: &SystemConfig, c_h: &Arc<HermitianPsd>, budget: &CmeBudget) -> Result<Self> {
        let a_mat = cfg.system_matrix();
        let c_n = cfg.noise_cov();
        Ok(match kind {
            EstimatorKind::Bussgang => Prepared::Bussgang(Box::new(BussgangEstimator::new(&a_mat, c_h, &c_n)?)),
            EstimatorKind::UnquantizedLmmse => Prepared::Lmmse(lmmse_filter(&a_mat, c_h, &c_n)?),
            EstimatorKind::CmeClosed => {
                if cfg.m == 1 && c_h.is_diagonal() {
                    Prepared::Univariate { sigma2: c_h.diag(), eta2: cfg.noise_var() }
                } else if cfg.n == 1 {
                    Prepared::Sector { psi: cfg.pilot.phases(cfg.m)?, sigma: c_h.diag()[0].sqrt() }
                } else {
                    return Err(Error::NotApplicable(
                        "cme_closed needs N = 1, or M = 1 with a diagonal channel covariance".into(),
                    ));
                }
            }
            EstimatorKind::CmeNumeric => {
                if cfg.noise_var() == 0.0 {
                    return Err(Error::NotApplicable("cme_numeric needs a finite SNR".into()));
                }
                Prepared::Numeric(Box::new(ImportanceSampler::new(&a_mat, c_h, &c_n, budget)?))
            }
            EstimatorKind::CmeNoiseless => {
                if cfg.m != 1 {
                    return Err(Error::NotApplicable("cme_noiseless needs M = 1".into()));
                }
                Prepared::Noiseless { c_h: Arc::clone(c_h), budget: *budget }
            }
        })
    }

    /// Whether the estimate depends only on the quantized pattern and a seed.
    fn pattern_based(&self) -> bool {
        matches!(self, Prepared::Numeric(_) | Prepared::Noiseless { .. })
    }

    fn estimate(&self, trial: &Trial, seed: u64) -> Result<(CVector, bool)> {
        self.estimate_pattern(&trial.r, Some(&trial.y), seed)
    }

    fn estimate_pattern(&self, r: &QuantizedObs, y: Option<&CVector>, seed: u64) -> Result<(CVector, bool)> {
        Ok(match self {
            Prepared::Bussgang(b) => (b.estimate(r)?, false),
            Prepared::Lmmse(w) => (w * y.expect("unquantized signal"), false),
            Prepared::Univariate { sigma2, eta2 } => {
                (CVector::from_fn(sigma2.len(), |k, _| cme_univariate(r.get(k), sigma2[k], *eta2)), false)
            }
            Prepared::Sector { psi, sigma } => {
                (CVector::from_element(1, cme_noiseless_sector(r, psi, *sigma)?), false)
            }
            Prepared::Numeric(s) => {
                let e = s.estimate(r, seed)?;
                (e.estimate, e.degenerate)
            }
            Prepared::Noiseless { c_h, budget } => {
                (cme_multivariate_noiseless(r, c_h, &budget.with_seed(seed))?.estimate, false)
            }
        })
    }
}

/// `C_h Aᴴ (A C_h Aᴴ + C_n)⁻¹`.
fn lmmse_filter(a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd) -> Result<CMatrix> {
    let c_y = a_mat * c_h.matrix() * a_mat.adjoint() + c_n.matrix();
    let c_hy = c_h.matrix() * a_mat.adjoint();
    let (wh, _) = solve_hermitian(&c_y, &c_hy.adjoint(), MAX_CONDITION, RIDGE).ok_or(Error::SingularCr)?;
    Ok(wh.adjoint())
}

/// Analytic MSE of [`lmmse_filter`], `tr(C_h − W A C_h)`.
fn lmmse_mse(a_mat: &CMatrix, c_h: &HermitianPsd, c_n: &HermitianPsd) -> Result<f64> {
    let w = lmmse_filter(a_mat, c_h, c_n)?;
    Ok(c_h.trace() - (w * a_mat * c_h.matrix()).trace().re)
}

/// FNV-1a over the sign pattern, for pattern-keyed seeds.
fn pattern_key(r: &QuantizedObs) -> u64 {
    r.real_signs().iter().fold(0xcbf2_9ce4_8422_2325, |h, &s| (h ^ (s as u8 as u64)).wrapping_mul(0x0100_0000_01b3))
}

struct PointContext<'a> {
    spec: &'a ScenarioSpec,
    cfg: SystemConfig,
    trials: Vec<Trial>,
    fixed_cov: Option<Arc<HermitianPsd>>,
}

struct Estimates {
    h_hat: Vec<CVector>,
    degenerate: usize,
}

impl PointContext<'_> {
    fn estimator_seed(&self, kind: EstimatorKind) -> u64 {
        derive_seed(self.spec.seed ^ self.spec.budget.seed(), ESTIMATOR_TAG + kind as u64)
    }

    fn run(&self, kind: EstimatorKind) -> Result<Estimates> {
        let base = self.estimator_seed(kind);
        let budget = &self.spec.budget;
        let results: Vec<(CVector, bool)> = match &self.fixed_cov {
            Some(c_h) => {
                let prepared = Prepared::new(kind, &self.cfg, c_h, budget)?;
                if prepared.pattern_based() {
                    let patterns: BTreeSet<&QuantizedObs> = self.trials.iter().map(|t| &t.r).collect();
                    let patterns: Vec<&QuantizedObs> = patterns.into_iter().collect();
                    let cache: BTreeMap<&QuantizedObs, (CVector, bool)> = patterns
                        .par_iter()
                        .map(|r| Ok((*r, prepared.estimate_pattern(r, None, derive_seed(base, pattern_key(r)))?)))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .collect();
                    self.trials.iter().map(|t| cache[&t.r].clone()).collect()
                } else {
                    self.trials
                        .par_iter()
                        .map(|t| prepared.estimate(t, derive_seed(base, t.index)))
                        .collect::<Result<_>>()?
                }
            }
            None => self
                .trials
                .par_iter()
                .map(|t| {
                    let prepared = Prepared::new(kind, &self.cfg, &t.channel_cov, budget)?;
                    prepared.estimate(t, derive_seed(base, t.index))
                })
                .collect::<Result<_>>()?,
        };
        let degenerate = results.iter().filter(|(_, d)| *d).count();
        Ok(Estimates { h_hat: results.into_iter().map(|(h, _)| h).collect(), degenerate })
    }

    fn row(&self, estimator: &str, metric: &str, value: f64, stderr: f64) -> SweepRow {
        SweepRow {
            scenario: self.spec.name.clone(),
            estimator: estimator.to_string(),
            n: self.cfg.n,
            m: self.cfg.m,
            snr_db: self.cfg.snr_db,
            pilot: self.spec.pilot.name().to_string(),
            trials: self.trials.len(),
            seed: self.spec.seed,
            metric_name: metric.to_string(),
            value,
            stderr,
        }
    }

    fn error(&self, estimator: &str, error: Error) -> RowError {
        RowError {
            scenario: self.spec.name.clone(),
            estimator: estimator.to_string(),
            n: self.cfg.n,
            m: self.cfg.m,
            snr_db: self.cfg.snr_db,
            error,
        }
    }

    fn metric_rows(&self, kind: EstimatorKind, est: &Estimates) -> Result<Vec<SweepRow>> {
        let n = self.cfg.n;
        let mut rows = Vec::new();
        for metric in &self.spec.metrics {
            let acc: MetricAccumulator = match metric {
                Metric::Nmse => self
                    .trials
                    .iter()
                    .zip(&est.h_hat)
                    .map(|(t, e)| normalized_squared_error(&t.h, e, n))
                    .collect(),
                Metric::Cosine => {
                    let acc: MetricAccumulator = self
                        .trials
                        .iter()
                        .zip(&est.h_hat)
                        .filter_map(|(t, e)| cosine_similarity(&t.h, e).ok())
                        .collect();
                    if acc.count == 0 {
                        return Err(Error::ZeroVector);
                    }
                    acc
                }
                Metric::Rate => self.rate_terms(&est.h_hat)?.into_iter().collect(),
            };
            rows.push(self.row(kind.name(), metric.name(), acc.mean(), acc.stderr()));
        }
        if est.degenerate > 0 {
            rows.push(self.row(kind.name(), "degenerate_fraction", est.degenerate as f64 / self.trials.len() as f64, 0.0));
        }
        if let Some(bad) = rows.iter().find(|r| !r.value.is_finite() || !(r.stderr >= 0.0)) {
            return Err(Error::InvalidArgument(format!("non-finite {} value {}", bad.metric_name, bad.value)));
        }
        Ok(rows)
    }

    fn rate_terms(&self, h_hat: &[CVector]) -> Result<Vec<f64>> {
        let eta2 = self.cfg.noise_var();
        let fixed = match &self.fixed_cov {
            Some(c) => Some(data_model(c, eta2)?),
            None => None,
        };
        self.trials
            .par_iter()
            .zip(h_hat)
            .map(|(t, e)| {
                let owned;
                let lin = match &fixed {
                    Some(l) => l,
                    None => {
                        owned = data_model(&t.channel_cov, eta2)?;
                        &owned
                    }
                };
                rate_term(&t.h, e, &lin.gain, &lin.c_r, &t.channel_cov)
            })
            .collect()
    }

    /// Analytic and closed-form NMSE values for this point.
    fn reference_rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        let Some(c_h) = &self.fixed_cov else { return rows };
        if !self.spec.metrics.contains(&Metric::Nmse) {
            return rows;
        }
        let n = self.cfg.n as f64;
        let eta2 = self.cfg.noise_var();
        let a_mat = self.cfg.system_matrix();
        let c_n = self.cfg.noise_cov();
        let kinds = &self.spec.estimators;
        if kinds.contains(&EstimatorKind::Bussgang) {
            if let Ok(b) = BussgangEstimator::new(&a_mat, c_h, &c_n) {
                rows.push(self.row("bussgang_analytic", "nmse", b.mse() / n, 0.0));
            }
        }
        if kinds.iter().any(EstimatorKind::is_cme) {
            let closed = if self.cfg.m == 1 && c_h.is_diagonal() {
                Some(c_h.diag().iter().map(|&s2| mse_univariate_closed(s2, eta2)).sum::<f64>() / n)
            } else if self.cfg.n == 1 && eta2 == 0.0 {
                self.cfg.pilot.phases(self.cfg.m).ok().map(|psi| mse_sector_closed(&psi, c_h.diag()[0]))
            } else {
                None
            };
            if let Some(v) = closed {
                rows.push(self.row("cme_closed_form", "nmse", v, 0.0));
            }
        }
        if kinds.contains(&EstimatorKind::UnquantizedLmmse) {
            if let Ok(v) = lmmse_mse(&a_mat, c_h, &c_n) {
                rows.push(self.row("unquantized_analytic", "nmse", v / n, 0.0));
            }
        }
        rows
    }
}

fn point_context(spec: &ScenarioSpec, n: usize, m: usize, snr_db: f64) -> Result<PointContext<'_>> {
    let (mode, fixed_cov) = match spec.cov_mode {
        CovSpec::Fixed => {
            let c = random_channel_covariance(n, derive_seed(spec.seed, FIXED_COV_TAG + n as u64))?;
            (CovarianceMode::Fixed(c.clone()), Some(Arc::new(c)))
        }
        CovSpec::PerTrial => (CovarianceMode::PerTrial, None),
    };
    let cfg = SystemConfig::new(n, m, snr_db, spec.pilot.clone(), mode, spec.seed)?;
    let trials = simulate_trials(&cfg, spec.trials)?;
    Ok(PointContext { spec, cfg, trials, fixed_cov })
}

fn spec_error(spec: &ScenarioSpec, n: usize, m: usize, snr_db: f64, estimator: &str, error: Error) -> RowError {
    RowError { scenario: spec.name.clone(), estimator: estimator.to_string(), n, m, snr_db, error }
}

/// Runs every estimator at every sweep point. An invalid spec is an error;
/// failures of single estimators are collected and the run continues.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioOutput> {
    spec.validate()?;
    let mut out = ScenarioOutput::default();
    for (n, m, snr_db) in spec.points() {
        if spec.estimators.is_empty() {
            out.errors.push(spec_error(spec, n, m, snr_db, "-", Error::InvalidArgument("no estimators".into())));
            continue;
        }
        let ctx = match point_context(spec, n, m, snr_db) {
            Ok(c) => c,
            Err(e) => {
                out.errors.push(spec_error(spec, n, m, snr_db, "-", e));
                continue;
            }
        };
        for &kind in &spec.estimators {
            match ctx.run(kind).and_then(|est| ctx.metric_rows(kind, &est)) {
                Ok(rows) => out.rows.extend(rows),
                Err(e) => out.errors.push(ctx.error(kind.name(), e)),
            }
        }
        out.rows.extend(ctx.reference_rows());
    }
    Ok(out)
}

/// Empirical quantiles of the per-trial normalized squared error on a 1%
/// grid (`q0.00` … `q1.00`, nearest rank) for a single-point scenario.
pub fn run_cdf(spec: &ScenarioSpec) -> Result<ScenarioOutput> {
    spec.validate()?;
    let points = spec.points();
    if points.len() != 1 {
        return Err(Error::InvalidArgument(format!("cdf needs a single sweep point, got {}", points.len())));
    }
    let (n, m, snr_db) = points[0];
    let mut out = ScenarioOutput::default();
    if spec.estimators.is_empty() {
        out.errors.push(spec_error(spec, n, m, snr_db, "-", Error::InvalidArgument("no estimators".into())));
        return Ok(out);
    }
    let ctx = match point_context(spec, n, m, snr_db) {
        Ok(c) => c,
        Err(e) => {
            out.errors.push(spec_error(spec, n, m, snr_db, "-", e));
            return Ok(out);
        }
    };
    for &kind in &spec.estimators {
        let est = match ctx.run(kind) {
            Ok(e) => e,
            Err(e) => {
                out.errors.push(ctx.error(kind.name(), e));
                continue;
            }
        };
        let mut errs: Vec<f64> =
            ctx.trials.iter().zip(&est.h_hat).map(|(t, e)| normalized_squared_error(&t.h, e, n)).collect();
        errs.sort_by(f64::total_cmp);
        let count = errs.len();
        for k in 0..=100usize {
            let rank = (k * count).div_ceil(100).max(1);
            let q = k as f64 / 100.0;
            out.rows.push(ctx.row(kind.name(), &format!("q{q:.2}"), errs[rank - 1], 0.0));
        }
    }
    Ok(out)
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn parse_value<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::InvalidArgument(format!("cannot parse '{s}'")))
}

/// One `[name]` section of a config file, keys in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSection {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<ConfigSection>> {
    let mut sections: Vec<ConfigSection> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: bad section header", i + 1)))?;
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::InvalidArgument(format!("line {}: duplicate section [{name}]", i + 1)));
            }
            sections.push(ConfigSection { name: name.to_string(), entries: Vec::new() });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", i + 1)))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: key outside a section", i + 1)))?;
        let key = k.trim().to_string();
        if section.entries.iter().any(|(existing, _)| *existing == key) {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key '{key}'", i + 1)));
        }
        section.entries.push((key, v.trim().to_string()));
    }
    Ok(sections)
}

/// Recognized config keys.
pub const CONFIG_KEYS: [&str; 14] = [
    "sweep",
    "values",
    "n",
    "m",
    "snr_db",
    "estimators",
    "metrics",
    "trials",
    "budget",
    "quasi",
    "cov_mode",
    "pilot",
    "phases",
    "seed",
];

impl ScenarioSpec {
    /// Applies a config section on top of `self`; unknown keys are errors.
    pub fn with_section(&self, section: &ConfigSection) -> Result<Self> {
        let mut spec = self.clone();
        spec.name = section.name.clone();
        let get = |key: &str| section.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        if let Some((k, _)) = section.entries.iter().find(|(k, _)| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("[{}]: unknown key '{k}'", section.name)));
        }
        let kind = get("sweep").unwrap_or(spec.sweep.kind());
        match get("values") {
            Some(values) => spec.sweep = Sweep::parse(kind, values)?,
            None if kind != spec.sweep.kind() => {
                return Err(Error::InvalidArgument(format!("[{}]: sweep '{kind}' needs values", section.name)))
            }
            None => {}
        }
        if let Some(v) = get("n") {
            spec.n = parse_value(v)?;
        }
        if let Some(v) = get("m") {
            spec.m = parse_value(v)?;
        }
        if let Some(v) = get("snr_db") {
            spec.snr_db = parse_value(v)?;
        }
        if let Some(v) = get("estimators") {
            spec.estimators = parse_estimators(v)?;
        }
        if let Some(v) = get("metrics") {
            spec.metrics = split_list(v).map(str::parse).collect::<Result<_>>()?;
        }
        if let Some(v) = get("trials") {
            spec.trials = parse_value(v)?;
        }
        if let Some(v) = get("budget") {
            spec.budget = budget_with_samples(&spec.budget, parse_value(v)?)?;
        }
        if let Some(v) = get("quasi") {
            spec.budget.mvn = spec.budget.mvn.quasi(parse_value(v)?);
        }
        if let Some(v) = get("cov_mode") {
            spec.cov_mode = v.parse()?;
        }
        match (get("pilot"), get("phases")) {
            (Some("explicit") | None, Some(p)) => {
                spec.pilot = PilotKind::Explicit(split_list(p).map(parse_value).collect::<Result<_>>()?)
            }
            (Some("explicit"), None) => {
                return Err(Error::InvalidArgument(format!("[{}]: explicit pilot needs phases", section.name)))
            }
            (Some(p), None) => spec.pilot = parse_pilot(p)?,
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument(format!("[{}]: phases require pilot = explicit", section.name)))
            }
            (None, None) => {}
        }
        if let Some(v) = get("seed") {
            spec.seed = parse_value(v)?;
        }
        Ok(spec)
    }
}

/// `optimal` or `ones`.
pub fn parse_pilot(s: &str) -> Result<PilotKind> {
    match s {
        "optimal" => Ok(PilotKind::Optimal),
        "ones" => Ok(PilotKind::AllOnes),
        _ => Err(Error::InvalidArgument(format!("unknown pilot '{s}'"))),
    }
}

/// Sets both the importance-sampling and orthant-integration sample counts.
pub fn budget_with_samples(budget: &CmeBudget, samples: usize) -> Result<CmeBudget> {
    let mvn = IntegrationBudget::new(samples, budget.mvn.seed)?.quasi(budget.mvn.quasi);
    CmeBudget::new(samples, mvn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small(name: &str, sweep: Sweep, estimators: Vec<EstimatorKind>) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(name, sweep, estimators);
        s.trials = 400;
        s.budget = budget_with_samples(&CmeBudget::default(), 2000).unwrap();
        s.seed = 3;
        s
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            parse_estimators("bussgang, cme_numeric").unwrap(),
            vec![EstimatorKind::Bussgang, EstimatorKind::CmeNumeric]
        );
        assert!(parse_estimators("bussgang,foo").is_err());
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!(Sweep::parse("snr_db", "-10, 0, inf").unwrap(), Sweep::SnrDb(vec![-10.0, 0.0, f64::INFINITY]));
        assert!(Sweep::parse("dim", "1, x").is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = small("s", Sweep::SnrDb(vec![]), vec![EstimatorKind::Bussgang]);
        assert!(s.validate().is_err());
        s.sweep = Sweep::SnrDb(vec![0.0]);
        s.trials = 99;
        assert!(s.validate().is_err());
        s.trials = 100;
        assert!(s.validate().is_ok());
        s.name = "a,b".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_estimator_list_gives_error_rows_only() {
        let s = small("e", Sweep::SnrDb(vec![0.0, 10.0]), vec![]);
        let out = run_scenario(&s).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.errors.len(), 2);
    }

    #[test]
    fn rows_follow_sweep_and_estimator_order() {
        let s = small(
            "order",
            Sweep::SnrDb(vec![0.0, 10.0]),
            vec![EstimatorKind::CmeClosed, EstimatorKind::Bussgang, EstimatorKind::UnquantizedLmmse],
        );
        let out = run_scenario(&s).unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let keys: Vec<(f64, &str, &str)> =
            out.rows.iter().map(|r| (r.snr_db, r.estimator.as_str(), r.metric_name.as_str())).collect();
        assert_eq!(keys[0], (0.0, "cme_closed", "nmse"));
        assert_eq!(keys[1], (0.0, "cme_closed", "cosine"));
        assert_eq!(keys[2], (0.0, "cme_closed", "rate"));
        assert_eq!(keys[3], (0.0, "bussgang", "nmse"));
        assert_eq!(keys[9], (0.0, "bussgang_analytic", "nmse"));
        assert_eq!(keys[10], (0.0, "cme_closed_form", "nmse"));
        assert_eq!(keys[11], (0.0, "unquantized_analytic", "nmse"));
        assert_eq!(keys[12].0, 10.0);
    }

    #[test]
    fn univariate_rows_agree_with_closed_forms() {
        let mut s = small(
            "uni",
            Sweep::SnrDb(vec![-5.0, 2.0, 20.0]),
            vec![EstimatorKind::CmeClosed, EstimatorKind::Bussgang, EstimatorKind::UnquantizedLmmse],
        );
        s.trials = 5000;
        s.metrics = vec![Metric::Nmse];
        let out = run_scenario(&s).unwrap();
        for snr in [-5.0, 2.0, 20.0] {
            let at = |e: &str| out.rows.iter().find(|r| r.snr_db == snr && r.estimator == e).unwrap();
            let eta2 = 10f64.powf(-snr / 10.0);
            let cme = at("cme_closed");
            assert!((cme.value - mse_univariate_closed(1.0, eta2)).abs() <= 3.0 * cme.stderr);
            assert!((at("cme_closed_form").value - mse_univariate_closed(1.0, eta2)).abs() < 1e-12);
            // the scalar Bussgang estimator is the CME
            assert!((at("bussgang_analytic").value - mse_univariate_closed(1.0, eta2)).abs() < 1e-12);
            let lin = at("unquantized_lmmse");
            assert!((lin.value - eta2 / (1.0 + eta2)).abs() <= 3.0 * lin.stderr);
        }
    }

    #[test]
    fn noiseless_multipilot_agrees_with_closed_form() {
        let mut s = small("mp", Sweep::Pilots(vec![1, 2, 5]), vec![EstimatorKind::CmeClosed]);
        s.trials = 5000;
        s.metrics = vec![Metric::Nmse];
        let out = run_scenario(&s).unwrap();
        for m in [1, 2, 5] {
            let mc = out.rows.iter().find(|r| r.m == m && r.estimator == "cme_closed").unwrap();
            let cf = out.rows.iter().find(|r| r.m == m && r.estimator == "cme_closed_form").unwrap();
            assert!((mc.value - cf.value).abs() <= 3.0 * mc.stderr, "M={m}: {} vs {}", mc.value, cf.value);
            assert!((cf.value - crate::cme::mse_multipilot_closed(m, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn not_applicable_estimators_are_reported() {
        let mut s = small("na", Sweep::Dim(vec![2]), vec![EstimatorKind::CmeNumeric, EstimatorKind::CmeClosed]);
        s.m = 2;
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.errors.len(), 2);
        assert!(out.rows.is_empty());
    }

    #[test]
    fn per_trial_covariance_runs() {
        let mut s = small(
            "pt",
            Sweep::Dim(vec![2, 3]),
            vec![EstimatorKind::Bussgang, EstimatorKind::CmeNoiseless],
        );
        s.cov_mode = CovSpec::PerTrial;
        s.trials = 100;
        let out = run_scenario(&s).unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(out.rows.len(), 2 * 2 * 3);
        assert!(out.rows.iter().all(|r| r.value.is_finite() && r.stderr >= 0.0));
    }

    #[test]
    fn cdf_quantiles_are_monotone() {
        let mut s = small("cdf", Sweep::Dim(vec![2]), vec![EstimatorKind::Bussgang, EstimatorKind::CmeNoiseless]);
        s.trials = 300;
        let out = run_cdf(&s).unwrap();
        assert_eq!(out.rows.len(), 2 * 101);
        for chunk in out.rows.chunks(101) {
            assert_eq!(chunk[0].metric_name, "q0.00");
            assert_eq!(chunk[50].metric_name, "q0.50");
            assert!(chunk.windows(2).all(|w| w[0].value <= w[1].value));
        }
        s.sweep = Sweep::Dim(vec![1, 2]);
        assert!(run_cdf(&s).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = small("c", Sweep::SnrDb(vec![f64::INFINITY]), vec![EstimatorKind::CmeClosed]);
        let text = csv_string(&run_scenario(&s).unwrap().rows);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 11);
        assert_eq!(&first[..9], &["c", "cme_closed", "1", "1", "inf", "optimal", "400", "3", "nmse"]);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn config_round_trip() {
        let text = "# demo\n[fig2]\nsweep = snr_db\nvalues = -10, 0, 10\nestimators = bussgang,cme_closed\n\
                    trials = 500\nseed = 9\n\n[pilots]\nsweep = pilots\nvalues = 1,2,4\nsnr_db = 10 # dB\n\
                    pilot = ones\ncov_mode = per_trial\nbudget = 3000\n";
        let sections = parse_config(text).unwrap();
        assert_eq!(sections.len(), 2);
        let base = ScenarioSpec::new("base", Sweep::SnrDb(vec![0.0]), vec![EstimatorKind::Bussgang]);
        let a = base.with_section(&sections[0]).unwrap();
        assert_eq!(a.name, "fig2");
        assert_eq!(a.sweep, Sweep::SnrDb(vec![-10.0, 0.0, 10.0]));
        assert_eq!(a.trials, 500);
        assert_eq!(a.seed, 9);
        let b = base.with_section(&sections[1]).unwrap();
        assert_eq!(b.sweep, Sweep::Pilots(vec![1, 2, 4]));
        assert_eq!(b.snr_db, 10.0);
        assert_eq!(b.pilot, PilotKind::AllOnes);
        assert_eq!(b.cov_mode, CovSpec::PerTrial);
        assert_eq!(b.budget.prior_samples, 3000);
        assert_eq!(b.budget.mvn.sample_count, 3000);
    }

    #[test]
    fn config_rejects_bad_input() {
        let base = ScenarioSpec::new("base", Sweep::SnrDb(vec![0.0]), vec![EstimatorKind::Bussgang]);
        let bad_key = parse_config("[x]\nsnr = 3\n").unwrap();
        assert!(base.with_section(&bad_key[0]).is_err());
        assert!(parse_config("n = 3\n").is_err());
        assert!(parse_config("[x]\nn 3\n").is_err());
        assert!(parse_config("[x]\n[x]\n").is_err());
        assert!(parse_config("[x]\nn = 1\nn = 2\n").is_err());
        let needs_values = parse_config("[x]\nsweep = dim\n").unwrap();
        assert!(base.with_section(&needs_values[0]).is_err());
        let explicit = parse_config(&format!("[x]\npilot = explicit\nphases = 0, {}\nm = 2\n", PI / 4.0)).unwrap();
        let s = base.with_section(&explicit[0]).unwrap();
        assert!(matches!(s.pilot, PilotKind::Explicit(ref p) if p.len() == 2));
    }

    #[test]
    fn pattern_keys_differ() {
        let a = QuantizedObs::from_labels(&[0, 1]).unwrap();
        let b = QuantizedObs::from_labels(&[1, 0]).unwrap();
        assert_ne!(pattern_key(&a), pattern_key(&b));
    }
}
