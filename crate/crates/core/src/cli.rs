//! Command-line front end: `run`, `sweep`, `plot` and `bounds`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::adaptive::{self, AlgorithmConfig, Estimator};
use crate::baselines::best_loss_bound;
use crate::error::{Error, Result};
use crate::harness::{self, Strategy, SweepConfig};
use crate::model::NoiseModel;
use crate::plot::{self, PlotSpec, ReferenceCurve};
use crate::posterior::{LossKind, DEFAULT_GRID_SIZE};

#[derive(Debug, Parser)]
#[command(name = "qpe-lab", version, about = "Adaptive Bayesian phase estimation simulator and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one adaptive estimation and write its trace as JSON.
    Run(RunArgs),
    /// Run a Monte Carlo sweep and write results, aggregate and manifest.
    Sweep(SweepArgs),
    /// Render an aggregate or results CSV as an SVG plot.
    Plot(PlotArgs),
    /// Tabulate the explicit loss bound over a budget ladder.
    Bounds(BoundsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

impl NoiseArgs {
    fn model(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, Args)]
pub struct AlgorithmArgs {
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long = "n-lim", default_value_t = 1 << 20)]
    pub n_lim: u32,
    /// Exponent of the confidence schedule.
    #[arg(long, default_value_t = 3.0)]
    pub p: f64,
    /// Scale of the confidence schedule.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    pub grid: usize,
    #[arg(long, default_value = "mae")]
    pub loss: LossKind,
    #[arg(long, default_value = "map")]
    pub estimator: Estimator,
}

impl AlgorithmArgs {
    fn config(&self, total_resources: u64, seed: u64) -> Result<AlgorithmConfig> {
        Ok(AlgorithmConfig {
            total_resources,
            depth_limit: self.n_lim,
            epsilon_exponent: self.p,
            epsilon_scale: self.epsilon,
            noise: self.noise.model()?,
            loss_kind: self.loss,
            estimator: self.estimator,
            grid_size: self.grid,
            seed,
        })
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long = "n-tot")]
    pub n_tot: u64,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[command(flatten)]
    pub algorithm: AlgorithmArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "trace.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated strategies: adaptive, qpea, nonadaptive-doubling, classical.
    #[arg(long, value_delimiter = ',', default_value = "adaptive")]
    pub strategies: Vec<Strategy>,
    /// Comma-separated budgets; `32,64,...,4096` extends the first ratio.
    #[arg(long)]
    pub ladder: String,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub r: usize,
    #[command(flatten)]
    pub algorithm: AlgorithmArgs,
    #[arg(long = "shots-per-depth", default_value_t = 16)]
    pub shots_per_depth: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measure wall-clock time per cell (makes outputs non-reproducible).
    #[arg(long = "record-runtime")]
    pub record_runtime: bool,
    /// Worker threads; defaults to QPE_LAB_THREADS, 0 means one per core.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "mae_mean")]
    pub y: String,
    /// Comma-separated reference curves: sql, hl, noisy_floor, appendix_bound.
    #[arg(long = "reference", value_delimiter = ',')]
    pub references: Vec<ReferenceCurve>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 3.0)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long = "n-lim", default_value_t = 1 << 20)]
    pub n_lim: u32,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = 3.0)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long = "n-lim", default_value_t = 1 << 20)]
    pub n_lim: u32,
    #[arg(long)]
    pub ladder: String,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `a,b,c` and expands `a,b,...,z` geometrically with ratio `b/a`.
pub fn parse_ladder(text: &str) -> Result<Vec<u64>> {
    let tokens: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let mut out: Vec<u64> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == "..." {
            let (a, b) = match out.as_slice() {
                [.., a, b] => (*a, *b),
                _ => return Err(Error::Parse("'...' needs two preceding budgets".into())),
            };
            let end: u64 = tokens
                .get(i + 1)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse("'...' needs a final budget".into()))?;
            if b <= a || b % a != 0 {
                return Err(Error::Parse("'...' needs an integer ratio above 1".into()));
            }
            let mut next = b * (b / a);
            while next < end {
                out.push(next);
                next *= b / a;
            }
            i += 1;
            continue;
        }
        out.push(
            tokens[i]
                .parse()
                .map_err(|_| Error::Parse(format!("bad budget '{}'", tokens[i])))?,
        );
        i += 1;
    }
    if out.is_empty() {
        return Err(Error::Parse("empty ladder".into()));
    }
    Ok(out)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = args.algorithm.config(args.n_tot, args.seed)?;
    let trace = adaptive::run(&config, args.theta)?;
    let json = serde_json::to_string_pretty(&trace).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&args.out, json + "\n")?;
    println!("estimate {:.12}", trace.final_estimate);
    println!("expected_loss {:.6e}", trace.final_expected_loss);
    println!("resources_spent {}", trace.resources_spent);
    println!("max_depth {}", trace.max_depth());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let noise = args.algorithm.noise.model()?;
    let config = SweepConfig {
        strategies: args.strategies.clone(),
        resource_ladder: parse_ladder(&args.ladder)?,
        theta_count: args.k,
        repetitions: args.r,
        noise,
        algorithm: args.algorithm.config(2, 0)?,
        shots_per_depth: args.shots_per_depth,
        master_seed: args.seed,
        record_runtime: args.record_runtime,
        threads: args.threads.unwrap_or_else(harness::threads_from_env),
    };
    config.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    // Only one handler can be installed per process; a second sweep keeps the first.
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    let output = harness::run_sweep_until(&config, &stop)?;
    harness::persist(&args.out_dir, &config, &output)?;
    println!(
        "{} cells completed, {} failed, written to {}",
        output.results.len(),
        output.failures.len(),
        args.out_dir.display()
    );
    if output.interrupted {
        return Err(Error::Io("interrupted; partial results written".into()));
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let spec = PlotSpec {
        y_column: args.y.clone(),
        references: args.references.clone(),
        noise: args.noise.model()?,
        bound_exponent: args.p,
        bound_epsilon: args.epsilon,
        depth_limit: args.n_lim,
    };
    let input = std::fs::File::open(&args.input)
        .map_err(|e| Error::Io(format!("{}: {e}", args.input.display())))?;
    let series = plot::load_series(input, &spec.y_column)?;
    std::fs::write(&args.output, plot::render_svg(&series, &spec)?)?;
    Ok(())
}

fn cmd_bounds(args: &BoundsArgs) -> Result<()> {
    let noise = args.noise.model()?;
    let ladder = parse_ladder(&args.ladder)?;
    let mut rows = vec!["n_tot,steps_mae,mae_bound,steps_mse,mse_bound".to_string()];
    for n in ladder {
        let (mae, m1) = best_loss_bound(n, args.p, args.epsilon, noise, args.n_lim, LossKind::AbsoluteError)?;
        let (mse, m2) = best_loss_bound(n, args.p, args.epsilon, noise, args.n_lim, LossKind::SquaredError)?;
        rows.push(format!(
            "{n},{m1},{},{m2},{}",
            harness::format_float(mae),
            harness::format_float(mse)
        ));
    }
    let text = rows.join("\n") + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Bounds(a) => cmd_bounds(a),
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_parsing() {
        assert_eq!(parse_ladder("2").unwrap(), vec![2]);
        assert_eq!(parse_ladder("32,64,...,512").unwrap(), vec![32, 64, 128, 256, 512]);
        assert_eq!(parse_ladder("10, 100, ..., 10000").unwrap(), vec![10, 100, 1000, 10000]);
        assert!(parse_ladder("...,4").is_err());
        assert!(parse_ladder("a,b").is_err());
        assert!(parse_ladder("").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["qpe-lab", "run", "--theta", "0"]), 2);
        assert_eq!(main_with_args(["qpe-lab", "frobnicate"]), 2);
        assert_eq!(main_with_args(["qpe-lab", "run", "--n-tot", "x"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("t.json");
        let out = out.to_str().unwrap();
        assert_eq!(main_with_args(["qpe-lab", "run", "--n-tot", "1", "--out", out]), 1);
        assert_eq!(main_with_args(["qpe-lab", "run", "--n-tot", "8", "--beta", "0", "--out", out]), 1);
        assert_eq!(main_with_args(["qpe-lab", "bounds", "--ladder", "4,8"]), 1);
    }
}
