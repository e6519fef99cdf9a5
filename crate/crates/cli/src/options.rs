//! Command-line flags and the matching config-file sections.
//!
//! Every option is optional here; flags win over the config file, which
//! wins over the built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rfflr::{Criterion, FpcaMethod, ScaleEstimator};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "RFFLR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rfflr", version, about = "Robust function-on-function linear regression")]
pub struct Cli {
    /// TOML file with defaults for any command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (overrides RFFLR_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a contaminated dataset.
    Simulate(SimulateOptions),
    /// Fit and select a regression model.
    Fit(FitOptions),
    /// Flag outlying samples with a fitted model.
    Detect(DetectOptions),
    /// Replicated comparison of the classical and robust pipelines.
    Benchmark(BenchmarkOptions),
    /// Predict response curves for new predictors.
    Predict(PredictOptions),
    /// Resample series of unequal length onto a common grid.
    Resample(ResampleOptions),
}

fn parse_scale(s: &str) -> std::result::Result<ScaleEstimator, String> {
    match s.to_ascii_lowercase().as_str() {
        "mad" => Ok(ScaleEstimator::Mad),
        "qn" => Ok(ScaleEstimator::Qn),
        other => Err(format!("unknown scale estimator `{other}` (expected mad or qn)")),
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    /// 1 (shifted regression matrix) or 2 (local bump).
    #[arg(long)]
    pub scenario: Option<u8>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of grid points.
    #[arg(long = "T", alias = "t")]
    #[serde(alias = "T")]
    pub t: Option<usize>,
    /// Fraction of outliers.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<FpcaMethod>,
    /// Defaults to rbic for the robust method and bic otherwise.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    /// Retained fraction of the trimmed regression.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mmax: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub n_starts: Option<usize>,
    /// FPCA estimator; by default robust only when the regression trims.
    #[arg(long)]
    pub fpca: Option<FpcaMethod>,
    /// Projection-pursuit scale estimator: mad or qn.
    #[arg(long, value_parser = parse_scale)]
    pub scale: Option<ScaleEstimator>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectOptions {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Probability that a regular sample is flagged.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub n_boot: Option<usize>,
    #[arg(long)]
    pub bandwidth_percentile: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fraction of least deep samples kept out of the bootstrap pool.
    #[arg(long)]
    pub trim: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report; a CSV with the same stem is written alongside.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkOptions {
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    pub a_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alpha_list: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "T", alias = "t")]
    #[serde(alias = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub n_starts: Option<usize>,
    /// Leave out the classical pipeline.
    #[arg(long)]
    pub skip_classical: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleOptions {
    /// Long-format CSV with columns id,t,value.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub resample_points: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub simulate: SimulateOptions,
    pub fit: FitOptions,
    pub detect: DetectOptions,
    pub benchmark: BenchmarkOptions,
    pub predict: PredictOptions,
    pub resample: ResampleOptions,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}

macro_rules! overlay {
    ($ty:ty { $($f:ident),* $(,)? }) => {
        impl $ty {
            /// Fill options missing on the command line from `file`.
            pub fn overlay(mut self, file: &Self) -> Self {
                $( if self.$f.is_none() { self.$f = file.$f.clone(); } )*
                self
            }
        }
    };
}

overlay!(SimulateOptions { scenario, n, t, a, noise_sd, seed, out });
overlay!(FitOptions { x, y, method, criterion, alpha, mmax, kmax, num_basis, variance_threshold, n_starts, fpca, scale, seed, model });
overlay!(DetectOptions { model, x, y, delta, n_boot, bandwidth_percentile, gamma, trim, seed, report });
overlay!(PredictOptions { model, x, out });
overlay!(ResampleOptions { input, num_basis, resample_points, out });

impl BenchmarkOptions {
    pub fn overlay(mut self, file: &Self) -> Self {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = file.$f.clone(); } )* };
        }
        fill!(scenarios, a_list, alpha_list, reps, n, t, num_basis, n_starts, seed, out);
        self.skip_classical |= file.skip_classical;
        self
    }
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value.clone().ok_or_else(|| CliError::input(format!("missing required option --{flag}")))
}

/// Thread count: flag, then environment, then config file.
pub fn resolve_threads(flag: Option<usize>, file: &ConfigFile) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n = v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::input(format!("{THREADS_ENV}={v} is not a thread count")))?;
        return Ok(Some(n));
    }
    Ok(file.threads)
}
