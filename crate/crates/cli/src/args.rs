use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "emgs", version, about = "Sparse graphical model estimation under spike-and-slab priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a graph and a data set from it.
    Simulate(SimulateArgs),
    /// Fit a single model.
    Fit(FitArgs),
    /// Fit along a tuning-parameter grid.
    Path(PathArgs),
    /// Select the tuning parameter by K-fold cross-validation.
    Cv(CvArgs),
    /// Fill missing cells with model-based conditional means.
    Impute(ImputeArgs),
    /// Compare a fitted result against a known truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Ar1,
    Ar2,
    Random,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginArg {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub n: usize,
    /// Edge probability of the random and cluster families.
    #[arg(long, default_value_t = 0.2)]
    pub prob: f64,
    /// Number of clusters; defaults to max(2, p/20).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, value_enum, default_value_t = MarginArg::Gaussian)]
    pub margin: MarginArg,
    /// Poisson mean for `--margin poisson`.
    #[arg(long, default_value_t = 2.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data.csv")]
    pub out_data: PathBuf,
    #[arg(long, default_value = "truth.json")]
    pub out_truth: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Emgs,
    EmgsCopula,
    Glasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Ridge,
    Diagonal,
    Glasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    Center,
    Standardize,
    None,
}

/// Hyperparameter overrides shared by every model-fitting subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Input CSV with a header row; empty cells and `NA` are missing.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Emgs)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 100.0)]
    pub v1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long, default_value_t = 2.0)]
    pub a_tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b_tau: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Ridge)]
    pub init: InitArg,
    /// Penalty of the glasso initialisation.
    #[arg(long, default_value_t = 0.1)]
    pub init_rho: f64,
    /// CSV with columns `variable,group` (1-based groups) for the
    /// block-rescaled prior.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Column transform before Gaussian fits; copula fits use ranks only.
    #[arg(long, value_enum, default_value_t = Preprocess::Center)]
    pub preprocess: Preprocess,
    /// Graph rule: `pstar:<t>`, `abs:<t>` or `topk:<k>`.
    #[arg(long, default_value = "pstar:0.5")]
    pub threshold: String,
    #[arg(long, default_value_t = 200)]
    pub saem_iter: usize,
    #[arg(long, default_value_t = 5)]
    pub saem_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub saem_sweeps: usize,
    /// Keep continuous columns at their normal scores in copula fits.
    #[arg(long)]
    pub fixed_continuous: bool,
    /// Also penalise the diagonal in glasso fits.
    #[arg(long)]
    pub penalize_diagonal: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Results JSON; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `null` for the wall-clock field so repeated runs are byte-identical.
    #[arg(long)]
    pub omit_timing: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.05)]
    pub v0: f64,
    /// Glasso penalty.
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PathArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// `min:max:count[:log]`; for glasso defaults to 40 log-spaced penalties
    /// up to the smallest fully sparse one.
    #[arg(long)]
    pub grid: Option<String>,
    /// Tidy CSV of `(param, j, k, omega, pstar)` along the path.
    #[arg(long)]
    pub path_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub path: PathArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Worker threads for fold fits.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeArg {
    Emgs,
    Empirical,
    ColumnMean,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImputeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "method", value_enum, default_value_t = ImputeArg::Emgs)]
    pub method: ImputeArg,
    /// `v0` grid for the cross-validated EMGS imputation.
    #[arg(long, default_value = "0.01:1:20:log")]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Hide this fraction of observed cells and report the imputation MSE.
    #[arg(long)]
    pub hide_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Completed data CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report JSON; standard output when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub omit_timing: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Results JSON from `fit`, `path` or `cv`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
