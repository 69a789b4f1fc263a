//! Deterministic Monte Carlo sweeps over strategies, budgets, phases and
//! repetitions, with aggregation and CSV persistence.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{self, AlgorithmConfig, AlgorithmTrace};
use crate::baselines::{self, QpeaConfig, StrategyOutcome};
use crate::error::{Error, Result};
use crate::model::{wrapped_distance, NoiseModel};

pub const RESULTS_HEADER: [&str; 11] = [
    "strategy",
    "n_tot",
    "theta_index",
    "theta_true",
    "rep",
    "abs_error",
    "sq_error",
    "expected_loss",
    "resources_spent",
    "max_depth",
    "runtime_ms",
];

pub const AGGREGATE_HEADER: [&str; 8] = [
    "strategy",
    "n_tot",
    "mae_mean",
    "mae_median",
    "mae_min",
    "mae_max",
    "mse_mean",
    "count",
];

pub const FAILURES_HEADER: [&str; 5] = ["strategy", "n_tot", "theta_index", "rep", "message"];

/// Environment variable capping the number of sweep workers (0 = one per core).
pub const THREADS_ENV: &str = "QPE_LAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Adaptive,
    Classical,
    NonadaptiveDoubling,
    Qpea,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Adaptive,
        Strategy::Classical,
        Strategy::NonadaptiveDoubling,
        Strategy::Qpea,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Classical => "classical",
            Strategy::NonadaptiveDoubling => "nonadaptive-doubling",
            Strategy::Qpea => "qpea",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    pub resource_ladder: Vec<u64>,
    pub theta_count: usize,
    pub repetitions: usize,
    pub noise: NoiseModel,
    /// Template for adaptive cells; budget, noise and seed are overwritten per cell.
    pub algorithm: AlgorithmConfig,
    /// Shots per quadrature and depth for the non-adaptive doubling strategy.
    pub shots_per_depth: u64,
    pub master_seed: u64,
    /// When false the `runtime_ms` column is written as 0 so files stay reproducible.
    pub record_runtime: bool,
    /// Worker count; 0 lets the thread pool pick.
    pub threads: usize,
}

impl SweepConfig {
    pub fn new(strategies: Vec<Strategy>, resource_ladder: Vec<u64>) -> Self {
        Self {
            strategies,
            resource_ladder,
            theta_count: 20,
            repetitions: 10,
            noise: NoiseModel::noiseless(),
            algorithm: AlgorithmConfig::new(2),
            shots_per_depth: 16,
            master_seed: 0,
            record_runtime: false,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("no strategies given".into()));
        }
        if self.resource_ladder.is_empty() {
            return Err(Error::InvalidConfig("empty resource ladder".into()));
        }
        if self.resource_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("resource ladder must be strictly increasing".into()));
        }
        if self.theta_count == 0 || self.repetitions == 0 {
            return Err(Error::InvalidConfig("theta count and repetitions must be at least 1".into()));
        }
        if self.shots_per_depth == 0 {
            return Err(Error::InvalidConfig("shots_per_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn theta(&self, index: usize) -> f64 {
        TAU * index as f64 / self.theta_count as f64
    }

    fn cells(&self) -> Vec<CellKey> {
        let mut strategies = self.strategies.clone();
        strategies.sort();
        strategies.dedup();
        let mut cells = Vec::new();
        for &strategy in &strategies {
            for &n_tot in &self.resource_ladder {
                for theta_index in 0..self.theta_count {
                    for rep in 0..self.repetitions {
                        cells.push(CellKey {
                            strategy,
                            n_tot,
                            theta_index,
                            rep,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Canonical sort key of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: Strategy,
    pub n_tot: u64,
    pub theta_index: usize,
    pub rep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub n_tot: u64,
    pub theta_index: usize,
    pub theta_true: f64,
    pub rep: usize,
    pub abs_error: f64,
    pub sq_error: f64,
    /// NaN when the strategy has no posterior to integrate.
    pub expected_loss: f64,
    pub resources_spent: u64,
    pub max_depth: u32,
    pub runtime_ms: f64,
}

impl CellResult {
    pub fn key(&self) -> CellKey {
        CellKey {
            strategy: self.strategy,
            n_tot: self.n_tot,
            theta_index: self.theta_index,
            rep: self.rep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: CellKey,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    /// True when the sweep stopped early on request.
    pub interrupted: bool,
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one cell; depends only on the master seed and the cell key.
pub fn cell_seed(master_seed: u64, key: &CellKey) -> u64 {
    let mut h = splitmix64(master_seed);
    for label_byte in key.strategy.label().bytes() {
        h = splitmix64(h ^ u64::from(label_byte));
    }
    for part in [key.n_tot, key.theta_index as u64, key.rep as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Callback that sees every adaptive trace produced by a sweep.
pub type TraceObserver<'a> = dyn Fn(&CellKey, &AlgorithmTrace) + Sync + 'a;

fn run_strategy(
    config: &SweepConfig,
    key: &CellKey,
    theta: f64,
    seed: u64,
    observer: &TraceObserver<'_>,
) -> Result<StrategyOutcome> {
    let loss = config.algorithm.loss_kind;
    match key.strategy {
        Strategy::Adaptive => {
            let cfg = AlgorithmConfig {
                total_resources: key.n_tot,
                noise: config.noise,
                seed,
                ..config.algorithm
            };
            let trace = adaptive::run(&cfg, theta)?;
            observer(key, &trace);
            Ok(StrategyOutcome {
                estimate: trace.final_estimate,
                resources_spent: trace.resources_spent,
                max_depth: trace.max_depth(),
                expected_loss: Some(trace.final_expected_loss),
            })
        }
        Strategy::Classical => baselines::run_classical(key.n_tot, theta, config.noise, seed, loss),
        Strategy::NonadaptiveDoubling => baselines::run_nonadaptive_doubling(
            key.n_tot,
            theta,
            config.noise,
            config.shots_per_depth,
            seed,
            loss,
        )
        .map(|r| r.outcome),
        Strategy::Qpea => {
            let cfg = QpeaConfig::for_budget(key.n_tot, config.noise, seed)?;
            baselines::run_qpea(theta, &cfg, loss)
        }
    }
}

/// Runs a single cell of the sweep.
pub fn run_cell(config: &SweepConfig, key: &CellKey) -> Result<CellResult> {
    run_cell_observed(config, key, &|_, _| {})
}

fn run_cell_observed(config: &SweepConfig, key: &CellKey, observer: &TraceObserver<'_>) -> Result<CellResult> {
    let theta = config.theta(key.theta_index);
    let seed = cell_seed(config.master_seed, key);
    let start = Instant::now();
    let outcome = run_strategy(config, key, theta, seed, observer)?;
    let runtime_ms = if config.record_runtime {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    if outcome.resources_spent > key.n_tot {
        return Err(Error::InvalidConfig(format!(
            "strategy spent {} of {} applications",
            outcome.resources_spent, key.n_tot
        )));
    }
    let abs_error = wrapped_distance(outcome.estimate, theta);
    Ok(CellResult {
        strategy: key.strategy,
        n_tot: key.n_tot,
        theta_index: key.theta_index,
        theta_true: theta,
        rep: key.rep,
        abs_error,
        sq_error: abs_error * abs_error,
        expected_loss: outcome.expected_loss.unwrap_or(f64::NAN),
        resources_spent: outcome.resources_spent,
        max_depth: outcome.max_depth,
        runtime_ms,
    })
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput> {
    run_sweep_until(config, &AtomicBool::new(false))
}

/// Like [`run_sweep`], but cells not yet started are skipped once `stop` is set.
pub fn run_sweep_until(config: &SweepConfig, stop: &AtomicBool) -> Result<SweepOutput> {
    run_sweep_observed(config, stop, &|_, _| {})
}

/// Like [`run_sweep_until`], also handing every adaptive trace to `observer`.
pub fn run_sweep_observed(
    config: &SweepConfig,
    stop: &AtomicBool,
    observer: &TraceObserver<'_>,
) -> Result<SweepOutput> {
    config.validate()?;
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<Option<Result<CellResult>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| {
                if stop.load(Ordering::Relaxed) {
                    None
                } else {
                    Some(run_cell_observed(config, key, observer))
                }
            })
            .collect()
    });
    let mut out = SweepOutput::default();
    for (key, outcome) in cells.into_iter().zip(outcomes) {
        match outcome {
            None => out.interrupted = true,
            Some(Ok(r)) => out.results.push(r),
            Some(Err(e)) => out.failures.push(CellFailure {
                key,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Worker count from the environment; unset or unparsable means auto.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GroupStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub n_tot: u64,
    pub mae: GroupStats,
    pub mse: GroupStats,
}

/// Statistics per `(strategy, n_tot)` over every cell of the group.
pub fn aggregate(results: &[CellResult]) -> Result<Vec<AggregateRow>> {
    if results.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut groups: BTreeMap<(String, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results {
        let g = groups.entry((r.strategy.label().to_string(), r.n_tot)).or_default();
        g.0.push(r.abs_error);
        g.1.push(r.sq_error);
    }
    groups
        .into_iter()
        .map(|((strategy, n_tot), (abs, sq))| {
            Ok(AggregateRow {
                strategy,
                n_tot,
                mae: GroupStats::from_values(&abs)?,
                mse: GroupStats::from_values(&sq)?,
            })
        })
        .collect()
}

/// Statistics per `(strategy, n_tot)` over the per-phase means, i.e. each
/// phase's repetitions are averaged first.
pub fn aggregate_by_theta(results: &[CellResult]) -> Result<Vec<AggregateRow>> {
    let mut per_theta: BTreeMap<(Strategy, u64, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in results {
        let e = per_theta.entry((r.strategy, r.n_tot, r.theta_index)).or_default();
        e.0 += r.abs_error;
        e.1 += r.sq_error;
        e.2 += 1;
    }
    let means: Vec<CellResult> = per_theta
        .into_iter()
        .map(|((strategy, n_tot, theta_index), (a, s, c))| CellResult {
            strategy,
            n_tot,
            theta_index,
            theta_true: f64::NAN,
            rep: 0,
            abs_error: a / c as f64,
            sq_error: s / c as f64,
            expected_loss: f64::NAN,
            resources_spent: 0,
            max_depth: 0,
            runtime_ms: 0.0,
        })
        .collect();
    aggregate(&means)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in natural-log units.
    pub residual: f64,
}

/// Least-squares fit of `ln(error)` against `ln(n_tot)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::DegenerateFit("need at least 3 distinct budgets".into()));
    }
    if points.iter().any(|&(n, e)| !(n > 0.0 && e > 0.0 && n.is_finite() && e.is_finite())) {
        return Err(Error::DegenerateFit("budgets and errors must be positive and finite".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, e)| (n.ln(), e.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    Ok(LogLogFit {
        slope,
        intercept,
        residual: (sse / m).sqrt(),
    })
}

/// Renders a float with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_results<W: Write>(writer: W, results: &[CellResult]) -> Result<()> {
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.key());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER).map_err(csv_error)?;
    for r in sorted {
        w.write_record([
            r.strategy.label().to_string(),
            r.n_tot.to_string(),
            r.theta_index.to_string(),
            format_float(r.theta_true),
            r.rep.to_string(),
            format_float(r.abs_error),
            format_float(r.sq_error),
            format_float(r.expected_loss),
            r.resources_spent.to_string(),
            r.max_depth.to_string(),
            format_float(r.runtime_ms),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, index: usize, name: &str) -> Result<T> {
    record
        .get(index)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad or missing '{name}' field")))
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse(format!(
            "unexpected header '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_reader(reader);
    check_header(r.headers().map_err(csv_error)?, &RESULTS_HEADER)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        out.push(CellResult {
            strategy: field(&rec, 0, "strategy")?,
            n_tot: field(&rec, 1, "n_tot")?,
            theta_index: field(&rec, 2, "theta_index")?,
            theta_true: field(&rec, 3, "theta_true")?,
            rep: field(&rec, 4, "rep")?,
            abs_error: field(&rec, 5, "abs_error")?,
            sq_error: field(&rec, 6, "sq_error")?,
            expected_loss: field(&rec, 7, "expected_loss")?,
            resources_spent: field(&rec, 8, "resources_spent")?,
            max_depth: field(&rec, 9, "max_depth")?,
            runtime_ms: field(&rec, 10, "runtime_ms")?,
        });
    }
    Ok(out)
}

pub fn write_aggregate<W: Write>(writer: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AGGREGATE_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.n_tot.to_string(),
            format_float(r.mae.mean),
            format_float(r.mae.median),
            format_float(r.mae.min),
            format_float(r.mae.max),
            format_float(r.mse.mean),
            r.mae.count.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_failures<W: Write>(writer: W, failures: &[CellFailure]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FAILURES_HEADER).map_err(csv_error)?;
    for f in failures {
        w.write_record([
            f.key.strategy.label().to_string(),
            f.key.n_tot.to_string(),
            f.key.theta_index.to_string(),
            f.key.rep.to_string(),
            f.message.clone(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: SweepConfig,
    pub cells_completed: usize,
    pub cells_failed: usize,
    pub interrupted: bool,
}

impl Manifest {
    pub fn new(config: &SweepConfig, output: &SweepOutput) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            cells_completed: output.results.len(),
            cells_failed: output.failures.len(),
            interrupted: output.interrupted,
        }
    }
}

pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes results, aggregate (when non-empty), failures and manifest into `dir`.
pub fn persist(dir: &Path, config: &SweepConfig, output: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results(std::fs::File::create(dir.join(RESULTS_FILE))?, &output.results)?;
    let aggregate_path = dir.join(AGGREGATE_FILE);
    if output.results.is_empty() {
        write_aggregate(std::fs::File::create(aggregate_path)?, &[])?;
    } else {
        write_aggregate(std::fs::File::create(aggregate_path)?, &aggregate(&output.results)?)?;
    }
    write_failures(std::fs::File::create(dir.join(FAILURES_FILE))?, &output.failures)?;
    let manifest = serde_json::to_string_pretty(&Manifest::new(config, output))
        .map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}
