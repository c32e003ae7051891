//! `flexcde`: generate simulated data, fit and tune conditional density
//! models, predict, evaluate, diagnose, run benchmark sweeps and fit
//! models on sample-set covariates.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use flexcde::CdeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Generate,
    Fit,
    Predict,
    Evaluate,
    Diagnose,
    Benchmark,
    Distfit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Fourier,
    Cosine,
    Haar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegressorArg {
    Knn,
    Nw,
    Spectral,
    Lasso,
}

#[derive(Debug, Parser)]
#[command(name = "flexcde", version, about = "Conditional density estimation by basis expansion")]
pub struct Args {
    #[arg(long, value_enum)]
    pub cmd: Command,
    /// Input CSV, or a sample-set directory for `distfit`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model file written by `fit` and read by `predict`, `evaluate`, `diagnose`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output file, or output directory for `diagnose`, `distfit` and sample-set `generate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "z")]
    pub response_col: String,
    #[arg(long, value_enum, default_value = "fourier")]
    pub basis: BasisArg,
    #[arg(long, value_enum, default_value = "knn")]
    pub regressor: RegressorArg,
    #[arg(long, default_value_t = 31)]
    pub max_cutoff: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    pub valid_frac: f64,
    /// Cells of the response grid.
    #[arg(long, default_value_t = 1000)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "FLEXCDE_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Scenario name (comma-separated list for `benchmark`); `sample_sets`
    /// makes `generate` write a sample-set directory.
    #[arg(long, default_value = "irrelevant_covariates")]
    pub scenario: String,
    /// Covariate dimension (comma-separated list for `benchmark`).
    #[arg(long, default_value = "10")]
    pub dims: String,
    /// Sample size (comma-separated list for `benchmark`).
    #[arg(long, default_value = "1000")]
    pub n: String,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub kl_k: usize,
    /// Comma-separated kernel scales; defaults to multiples of the median divergence.
    #[arg(long)]
    pub sigma2_grid: Option<String>,
    #[arg(long, default_value = "0.25,0.5,0.75,0.9")]
    pub alpha_levels: String,
    /// Model the logarithm of the response; point errors are computed on the original scale.
    #[arg(long)]
    pub log_scale_response: bool,
    /// Benchmark methods: flexcode-{knn,nw,spectral,lasso}, kde, knn_cde, fkde, oracle.
    #[arg(long, default_value = "flexcode-knn,kde")]
    pub methods: String,
    /// Record wall-clock times in benchmark output (makes output run-dependent).
    #[arg(long)]
    pub timing: bool,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CdeError>() {
            return match e {
                CdeError::Config(_) => EXIT_CONFIG,
                CdeError::Io { .. } => EXIT_IO,
                CdeError::Numeric(_) => EXIT_NUMERIC,
                CdeError::Domain { .. }
                | CdeError::Shape(_)
                | CdeError::Size(_)
                | CdeError::DegenerateResponse(_)
                | CdeError::Contract(_)
                | CdeError::Data(_)
                | CdeError::DivisionByZero(_)
                | CdeError::Serde(_) => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let args = Args::parse();
    match commands::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
