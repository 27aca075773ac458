//! Command-line front end: fit, cross-validate, simulate, score and benchmark.

mod commands;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pwgee::{CorrelationKind, Family, SelectionRule, Weighting};

#[derive(Parser)]
#[command(
    name = "pwgee",
    version,
    about = "Penalized weighted GEE for clustered data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit at a single lambda.
    Fit(FitArgs),
    /// Select lambda by fourfold cross-validation and refit.
    Cv(CvArgs),
    /// Write simulated datasets.
    Simulate(SimulateArgs),
    /// Summarize fit results against known coefficients.
    Metrics(MetricsArgs),
    /// Run a Monte-Carlo experiment described by a JSON grid.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Long-format CSV, one row per observation.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value = "cluster")]
    pub cluster: String,
    /// Comma-separated covariate columns; all remaining columns when omitted.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Center and scale covariates before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Prepend an unpenalized all-ones column.
    #[arg(long)]
    pub intercept: bool,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "gaussian")]
    pub family: Family,
    #[arg(long, default_value = "indep")]
    pub corr: CorrelationKind,
    /// Fix the working correlation parameter instead of estimating it.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, default_value = "on")]
    pub weighting: Weighting,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone)]
pub struct SolverArgs {
    /// scad, mcp or lasso.
    #[arg(long, default_value = "scad")]
    pub penalty: String,
    #[arg(long, default_value_t = pwgee::penalty::DEFAULT_SCAD_A)]
    pub scad_a: f64,
    #[arg(long, default_value_t = pwgee::penalty::DEFAULT_MCP_GAMMA)]
    pub mcp_gamma: f64,
    #[arg(long, default_value_t = pwgee::solver::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = pwgee::solver::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = pwgee::solver::DEFAULT_ZERO_THRESHOLD)]
    pub zero_threshold: f64,
    /// Comma-separated covariate names left unpenalized.
    #[arg(long, value_delimiter = ',')]
    pub exempt: Vec<String>,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub lambda: f64,
    /// JSON output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Explicit comma-separated grid; overrides the log grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = pwgee::tuning::DEFAULT_GRID_SIZE)]
    pub grid_size: usize,
    #[arg(long, default_value_t = pwgee::tuning::DEFAULT_GRID_RATIO)]
    pub grid_ratio: f64,
    #[arg(long, default_value = "one_se")]
    pub rule: SelectionRule,
    /// CSV of held-out losses (lambda, fold, loss).
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Design number, 1-4.
    #[arg(long)]
    pub example: u8,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub p: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// JSON with `beta_star` and optionally `covariate_names`, as written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Fit result JSON files.
    #[arg(required = true)]
    pub fits: Vec<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for summary.csv, records.csv and table.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; rayon's default when omitted.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Fit(a) => commands::fit(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}
