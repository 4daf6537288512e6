//! `nexlq`: solve, simulate and certify graphon mean-field LQ problems.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "nexlq", version, about = "Linear-quadratic control of graphon-coupled mean-field SDEs")]
struct Cli {
    /// Worker threads for the solvers and the simulator.
    #[arg(long, global = true, env = "NEXLQ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the backward system and write K, K̄, Y, Λ and the feedback law.
    Solve(SolveArgs),
    /// Solve, then check the fundamental relation for the optimal law and perturbations of it.
    Certify(CertifyArgs),
    /// Solve, then simulate the closed loop and write moments and the cost report.
    Simulate(CertifyArgs),
    /// Interbank systemic-risk model with closed-form checks.
    SystemicRisk(SystemicRiskArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Heterogeneous banks on Gaussian graphons.
    SystemicRisk,
    /// Label-independent banks with unit graphons.
    SystemicRiskHomogeneous,
}

#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Problem file (TOML).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub problem: Option<PathBuf>,
    /// Built-in problem.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of labels; defaults to the file's grid, or 16 for presets.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Time steps per unit of time.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps_per_unit: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ToleranceArgs {
    /// Allowed K eigenvalue below zero, relative to sup|K|.
    #[arg(long, default_value_t = 1e-8)]
    pub tol_psd: f64,
    /// Allowed flip-transpose deviation of K̄.
    #[arg(long, default_value_t = 1e-10)]
    pub tol_flip: f64,
    /// Allowed deviation from closed-form references.
    #[arg(long, default_value_t = 1e-6)]
    pub tol_explicit: f64,
    /// Monte Carlo standard errors allowed in each gap.
    #[arg(long, default_value_t = 3.0)]
    pub tol_stderr: f64,
    /// Gap allowance relative to |V|.
    #[arg(long, default_value_t = 0.01)]
    pub tol_rel: f64,
}

#[derive(Args, Debug, Clone)]
pub struct MonteCarloArgs {
    /// Monte Carlo paths per label.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: u64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub tol: ToleranceArgs,
}

#[derive(Args, Debug, Clone)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub mc: MonteCarloArgs,
    #[command(flatten)]
    pub tol: ToleranceArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SystemicRiskArgs {
    /// Model configuration (TOML); defaults to the heterogeneous preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the homogeneous model instead.
    #[arg(long, conflicts_with = "config")]
    pub homogeneous: bool,
    /// Mean-reversion rate k (≤ 0).
    #[arg(long, allow_hyphen_values = true)]
    pub k: Option<f64>,
    /// Base volatility.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Base running penalty η.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Base terminal penalty r.
    #[arg(long)]
    pub r: Option<f64>,
    /// Horizon.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Number of labels.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps_per_unit: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also certify with this many Monte Carlo paths.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tol: ToleranceArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start {t} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::Solve(a) => commands::solve(a),
        Command::Certify(a) => commands::certify(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::SystemicRisk(a) => commands::systemic_risk(a),
    };
    match outcome {
        Ok(failed) if failed.is_empty() => ExitCode::SUCCESS,
        Ok(failed) => {
            for name in failed {
                eprintln!("check failed: {name}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
