use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "kapc", version, about = "Kernelized additive principal components")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit components and write a model document (JSON).
    Fit(FitArgs),
    /// Cross-validate a common penalty over a grid and write the scores (JSON).
    Cv(CvArgs),
    /// Draw the four-variable simulated example as CSV.
    Simulate(SimulateArgs),
    /// Evaluate a fitted model's transforms at new points (CSV).
    Eval(EvalArgs),
    /// Write transform curves on an even grid over each variable's range (CSV).
    Plotdata(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Gaussian,
    Sobolev,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Power,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DfKindArg {
    /// tr(S)
    TrS,
    /// tr(S^2)
    TrS2,
    /// tr(2S - S^2)
    Tr2sMinusS2,
}

/// Data and per-variable kernels.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Data CSV: header row, one column per variable.
    #[arg(long, short)]
    pub input: Option<PathBuf>,

    /// Kernel, one for all variables or a comma-separated list.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gaussian")]
    pub kernel: Vec<KernelKind>,

    /// Gaussian bandwidth(s).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub bandwidth: Vec<f64>,

    /// Sobolev order(s).
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub order: Vec<usize>,

    /// Kernel matrix CSV files (no header, n x n) for `--kernel precomputed`.
    #[arg(long, value_delimiter = ',')]
    pub matrices: Vec<PathBuf>,

    /// Standardize each column to mean 0 and unit sample variance first.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid base b in {b^min, ..., b^max}.
    #[arg(long, default_value = "1.5")]
    pub grid_base: f64,

    #[arg(long, default_value = "-29", allow_hyphen_values = true)]
    pub grid_min: i32,

    #[arg(long, default_value = "5", allow_hyphen_values = true)]
    pub grid_max: i32,

    /// Explicit grid values; overrides base/min/max.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,

    #[arg(long, default_value = "5")]
    pub folds: usize,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value = "power")]
    pub solver: SolverArg,

    /// Number of components.
    #[arg(long, default_value = "1")]
    pub components: usize,

    #[arg(long, default_value = "0")]
    pub seed: u64,

    /// Relative change of the criterion that stops the power iteration.
    #[arg(long, default_value = "1e-9")]
    pub tol: f64,

    #[arg(long, default_value = "10000")]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("penalty").required(true).args(["alpha", "cv", "df_target", "df_preset"])))]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Penalty: one value for all variables or one per variable.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,

    /// Choose a common penalty by cross-validation over the grid.
    #[arg(long)]
    pub cv: bool,

    /// Calibrate each variable's penalty to this many degrees of freedom.
    #[arg(long)]
    pub df_target: Option<f64>,

    /// Degrees-of-freedom target n / (10 p) per variable.
    #[arg(long)]
    pub df_preset: bool,

    #[arg(long, value_enum, default_value = "tr-s")]
    pub df_kind: DfKindArg,

    #[command(flatten)]
    pub grid: GridArgs,

    #[command(flatten)]
    pub solver: SolverArgs,

    /// Output file (stdout when absent).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub grid: GridArgs,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, short, default_value = "250")]
    pub n: usize,

    #[arg(long, default_value = "0")]
    pub seed: u64,

    /// Also write the latent normal values (y1..y4).
    #[arg(long)]
    pub latent: bool,

    /// Also write the true transform values (phi1..phi4).
    #[arg(long)]
    pub truth: bool,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model document written by `fit`.
    #[arg(long, short)]
    pub model: PathBuf,

    /// Points CSV with the model's variables as columns.
    #[arg(long)]
    pub points: PathBuf,

    /// Component number, starting at 1.
    #[arg(long, default_value = "1")]
    pub component: usize,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, short)]
    pub model: PathBuf,

    #[arg(long, default_value = "1")]
    pub component: usize,

    /// Grid points per variable.
    #[arg(long, default_value = "200")]
    pub points: usize,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
