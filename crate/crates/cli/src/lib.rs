//! Reproducible experiments on top of the `mmdag` library: synthetic data
//! generation, fitting, evaluation, causal-difference queries and benchmark
//! sweeps.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod methods;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmdag::learner::Coupling;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mmdag", version, about = "Multi-task multi-modal DAG learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default configuration.
    DefaultConfig,
    /// Generate a synthetic multi-task dataset and its ground truth.
    Synth(SynthArgs),
    /// Fit per-task graphs to a dataset directory.
    Fit(FitArgs),
    /// Score fit results against a ground-truth file.
    Eval(EvalArgs),
    /// Causal difference between two graph files.
    Cd(CdArgs),
    /// Run every method over a grid of sample sizes and task counts.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub benchmark: BenchmarkOverrides,
    #[command(flatten)]
    pub hyperparams: HyperOverrides,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BenchmarkOverrides {
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub basis_size: Option<usize>,
    #[arg(long)]
    pub er_edge_prob: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub grid_len: Option<usize>,
    /// Single seed for data generation and the optimizer.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CouplingArg {
    Dcd,
    MatrixDiff,
    None,
}

impl From<CouplingArg> for Coupling {
    fn from(c: CouplingArg) -> Self {
        match c {
            CouplingArg::Dcd => Coupling::Dcd,
            CouplingArg::MatrixDiff => Coupling::MatrixDiff,
            CouplingArg::None => Coupling::None,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct HyperOverrides {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Sigmoid sharpness of the differentiable causal difference.
    #[arg(long = "c")]
    pub c: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub rate_r: Option<f64>,
    #[arg(long)]
    pub h_min: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub inner_tol: Option<f64>,
    #[arg(long)]
    pub check_every: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long, value_enum)]
    pub coupling: Option<CouplingArg>,
    #[arg(long)]
    pub deterministic: Option<bool>,
    #[arg(long)]
    pub per_task_dual: Option<bool>,
    #[arg(long)]
    pub standardize: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the dataset and `truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `synth` or by hand.
    #[arg(long)]
    pub data: PathBuf,
    /// Result directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Sets coupling and preprocessing together.
    #[arg(long, value_enum)]
    pub method: Option<methods::Method>,
    /// Replace curves by interval averages before fitting.
    #[arg(long)]
    pub mvdag: bool,
    /// Record wall-clock time in `fit.json`.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Result directories; one row block per directory.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Ground-truth file written by `synth`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CdMode {
    Exact,
    Differentiable,
}

#[derive(Debug, Clone, Args)]
pub struct CdArgs {
    pub u: PathBuf,
    pub v: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    pub mode: CdMode,
    /// Sigmoid sharpness for the differentiable mode.
    #[arg(long = "c", default_value_t = 10.0)]
    pub c: f64,
    /// Optional JSON record of the result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for `rows.csv` and `summary.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Record wall-clock seconds per run.
    #[arg(long)]
    pub timing: bool,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<methods::Method>>,
    /// Sample sizes to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_samples: Option<Vec<usize>>,
    /// Task counts to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_tasks: Option<Vec<usize>>,
    /// Seeds to run, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => {
            println!("{}", config::ExperimentConfig::default().to_json());
            Ok(())
        }
        Command::Synth(a) => commands::synth(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Cd(a) => commands::cd(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}
