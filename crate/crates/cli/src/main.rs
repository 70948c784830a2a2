use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Robust controllers for linear-quadratic mean-field-type games.
#[derive(Debug, Parser)]
#[command(name = "robust-mftg", version)]
struct Cli {
    /// Worker threads for simulation and gradient estimation. The
    /// `ROBUST_MFTG_THREADS` environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Infinite population.
    Mf,
    /// `--agents` agents.
    Finite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    /// Receding horizon, zero-order gradients.
    Rgda,
    /// Receding horizon, exact gradients.
    Ergda,
    /// Full-horizon exact gradient descent ascent.
    Baseline,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Rgda => "rgda",
            Algo::Ergda => "ergda",
            Algo::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Constant,
    /// `η / (k + 1)`.
    Inverse,
}

#[derive(Debug, clap::Args)]
pub struct SolveArgs {
    pub model: PathBuf,
    /// Directory for gains, value matrices and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct CheckGammaArgs {
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "mf")]
    pub mode: Mode,
    /// Population size for `--mode finite`.
    #[arg(long)]
    pub agents: Option<usize>,
    /// Search for the smallest viable γ instead of testing the model's own.
    #[arg(long)]
    pub min_gamma: bool,
    /// Search bracket and tolerance; implies `--min-gamma`.
    #[arg(long, num_args = 3, value_names = ["LO", "HI", "TOL"])]
    pub bisect: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct LearnArgs {
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "rgda")]
    pub algo: Algo,
    /// Inner iterations per timestep (per run for the baseline).
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "constant")]
    pub lr_schedule: Schedule,
    /// Zero-order mini-batch size.
    #[arg(long, default_value_t = 1000)]
    pub batch: usize,
    /// Zero-order smoothing radius.
    #[arg(long, default_value_t = 0.1)]
    pub radius: f64,
    /// Agents per simulated population.
    #[arg(long, default_value_t = 100)]
    pub agents: usize,
    /// Rollouts averaged per cost evaluation.
    #[arg(long, default_value_t = 1)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pair smoothing directions `(e, -e)`.
    #[arg(long)]
    pub antithetic: bool,
    /// Subtract the cost at the unperturbed gains from every sample.
    #[arg(long)]
    pub baseline_subtract: bool,
    /// Squared projection radius; derived from the oracle when omitted.
    #[arg(long)]
    pub proj_radius_sq: Option<f64>,
    /// Evaluation covariance of the deviation state, as a JSON matrix.
    #[arg(long)]
    pub eval_cov_y: Option<String>,
    /// Evaluation covariance of the mean state, as a JSON matrix.
    #[arg(long)]
    pub eval_cov_z: Option<String>,
    /// Exact mode: stop a timestep once its gradient vanishes.
    #[arg(long)]
    pub early_stop: bool,
    /// Record elapsed time in `wall_ms` (makes traces non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    pub model: PathBuf,
    /// Horizons to run; the model must be time-invariant unless the list is
    /// just its own horizon.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    pub horizons: Vec<usize>,
    #[arg(long, default_value_t = 70)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.025)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub proj_radius_sq: Option<f64>,
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Riccati recursions and report the Nash value.
    Solve(SolveArgs),
    /// Test an attenuation level, or search for the smallest viable one.
    CheckGamma(CheckGammaArgs),
    /// Run a learner and write its trace.
    Learn(LearnArgs),
    /// Run the receding-horizon and full-horizon learners side by side.
    Compare(CompareArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = commands::init_threads(cli.threads).and_then(|threads| match cli.command {
        Command::Solve(args) => commands::solve(&args, &argv, threads),
        Command::CheckGamma(args) => commands::check_gamma(&args, &argv, threads),
        Command::Learn(args) => commands::learn(&args, &argv, threads),
        Command::Compare(args) => commands::compare(&args, &argv, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
