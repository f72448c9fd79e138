//! `onebit-sim`: scenario sweeps, error CDFs, rate bounds and the validation
//! suite from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric
//! failure (some estimator could not produce rows).

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use onebit_core::channel::PilotKind;
use onebit_core::harness::{
    budget_with_samples, parse_config, parse_estimators, run_cdf, run_scenario, write_csv, EstimatorKind, Metric,
    ScenarioOutput, ScenarioSpec, Sweep,
};
use onebit_core::validation::{run_criterion, ValidationOptions, CRITERIA};

const USAGE: u8 = 1;
const VALIDATION: u8 = 2;
const NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "onebit-sim", version, about = "Channel estimation from one-bit quantized observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// NMSE, cosine similarity and rate versus SNR
    SweepSnr(Common),
    /// Metrics versus the number of antennas
    SweepDim(Common),
    /// Metrics versus the number of pilots
    SweepPilots(Common),
    /// Quantiles of the per-trial squared error at one operating point
    Cdf(Common),
    /// Achievable-rate lower bound versus SNR
    Rate(Common),
    /// Run the acceptance checks
    Validate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated criterion numbers to run instead of all
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file with `[name]` sections of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    pilot: Option<PilotArg>,
    /// Comma-separated subset of bussgang, cme_closed, cme_numeric, cme_noiseless, unquantized_lmmse
    #[arg(long)]
    estimators: Option<String>,
    /// Monte-Carlo samples for importance sampling and orthant integrals
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PilotArg {
    Optimal,
    Ones,
}

enum Mode {
    Sweep,
    Cdf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: USAGE, message: message.into() }
    }
}

fn default_spec(command: &Command) -> (ScenarioSpec, Mode) {
    use EstimatorKind::*;
    let spec = |name: &str, sweep, estimators| {
        let mut s = ScenarioSpec::new(name, sweep, estimators);
        s.seed = 1;
        s
    };
    match command {
        Command::SweepSnr(_) => {
            let mut s = spec(
                "snr",
                Sweep::SnrDb(vec![-10.0, -5.0, 0.0, 2.5, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]),
                vec![CmeClosed, Bussgang, UnquantizedLmmse],
            );
            s.snr_db = 0.0;
            (s, Mode::Sweep)
        }
        Command::SweepDim(_) => (spec("dim", Sweep::Dim(vec![1, 2, 3, 4]), vec![CmeNoiseless, Bussgang]), Mode::Sweep),
        Command::SweepPilots(_) => {
            let mut s = spec("pilots", Sweep::Pilots(vec![1, 2, 4, 8, 16]), vec![CmeNumeric, CmeClosed, Bussgang]);
            s.snr_db = 10.0;
            s.budget = budget_with_samples(&s.budget, 4000).expect("valid budget");
            (s, Mode::Sweep)
        }
        Command::Cdf(_) => {
            let mut s = spec("cdf", Sweep::Dim(vec![4]), vec![CmeNoiseless, Bussgang]);
            s.metrics = vec![Metric::Nmse];
            (s, Mode::Cdf)
        }
        Command::Rate(_) | Command::Validate { .. } => {
            let mut s = spec(
                "rate",
                Sweep::SnrDb(vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]),
                vec![CmeNumeric, Bussgang],
            );
            s.n = 4;
            s.metrics = vec![Metric::Rate];
            (s, Mode::Sweep)
        }
    }
}

fn required_sweep(command: &Command) -> Option<&'static str> {
    match command {
        Command::SweepSnr(_) => Some("snr_db"),
        Command::SweepDim(_) => Some("dim"),
        Command::SweepPilots(_) => Some("pilots"),
        _ => None,
    }
}

fn build_specs(command: &Command, common: &Common) -> Result<(Vec<ScenarioSpec>, Mode), Failure> {
    let (base, mode) = default_spec(command);
    let mut specs = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            let sections = parse_config(&text).map_err(|e| Failure::usage(e.to_string()))?;
            if sections.is_empty() {
                return Err(Failure::usage(format!("{} has no scenarios", path.display())));
            }
            sections
                .iter()
                .map(|s| base.with_section(s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::usage(e.to_string()))?
        }
        None => vec![base],
    };
    for spec in &mut specs {
        if let Some(seed) = common.seed {
            spec.seed = seed;
        }
        if let Some(trials) = common.trials {
            spec.trials = trials;
        }
        if let Some(p) = common.pilot {
            spec.pilot = match p {
                PilotArg::Optimal => PilotKind::Optimal,
                PilotArg::Ones => PilotKind::AllOnes,
            };
        }
        if let Some(list) = &common.estimators {
            spec.estimators = parse_estimators(list).map_err(|e| Failure::usage(e.to_string()))?;
        }
        if let Some(samples) = common.budget {
            spec.budget = budget_with_samples(&spec.budget, samples).map_err(|e| Failure::usage(e.to_string()))?;
        }
        if spec.estimators.is_empty() {
            return Err(Failure::usage(format!("[{}]: no estimators", spec.name)));
        }
        if let Some(kind) = required_sweep(command) {
            if spec.sweep.kind() != kind {
                return Err(Failure::usage(format!("[{}]: expected a {kind} sweep", spec.name)));
            }
        }
        spec.validate().map_err(|e| Failure::usage(format!("[{}]: {e}", spec.name)))?;
    }
    Ok((specs, mode))
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => fs::File::create(p)
            .map(|f| Box::new(io::BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", p.display()))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn io_failure(e: io::Error) -> Failure {
    Failure { code: NUMERIC, message: format!("write failed: {e}") }
}

fn run_scenarios(command: &Command, common: &Common) -> Result<(), Failure> {
    let (specs, mode) = build_specs(command, common)?;
    let mut all = ScenarioOutput::default();
    for spec in &specs {
        let out = match mode {
            Mode::Sweep => run_scenario(spec),
            Mode::Cdf => run_cdf(spec),
        }
        .map_err(|e| Failure::usage(format!("[{}]: {e}", spec.name)))?;
        all.extend(out);
    }
    let mut w = open_out(&common.out)?;
    write_csv(&all.rows, &mut w).map_err(io_failure)?;
    w.flush().map_err(io_failure)?;
    if all.errors.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = all.errors.iter().map(ToString::to_string).collect();
    Err(Failure { code: NUMERIC, message: lines.join("\n") })
}

fn run_validate(common: &Common, only: &[u8]) -> Result<(), Failure> {
    let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only.to_vec() };
    if let Some(bad) = ids.iter().find(|id| !CRITERIA.iter().any(|c| c.0 == **id)) {
        return Err(Failure::usage(format!("unknown criterion {bad}")));
    }
    let mut w = open_out(&common.out)?;
    let opts = ValidationOptions::default();
    let mut failed = Vec::new();
    for id in ids {
        let report = run_criterion(id, &opts);
        writeln!(w, "{report}").map_err(io_failure)?;
        w.flush().map_err(io_failure)?;
        if !report.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: VALIDATION, message: format!("failed criteria: {failed:?}") })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Validate { common, only } => run_validate(common, only),
        Command::SweepSnr(c) | Command::SweepDim(c) | Command::SweepPilots(c) | Command::Cdf(c) | Command::Rate(c) => {
            run_scenarios(&cli.command, c)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("onebit-sim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
