//! Command-line surface. Every setting can also come from a TOML file given
//! with `--config`; flags override the file, the file overrides defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "vcplm", version, about = "Semiparametric quantile regression for varying-coefficient models")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a three-stage LS, QR or CQR model to a CSV file.
    Fit(ModelArgs),
    /// One-step sparse fit with a BIC-tuned SCAD penalty.
    Select(ModelArgs),
    /// Monte Carlo study on the built-in simulation designs.
    Simulate(SimulateArgs),
    /// Asymptotic efficiency of CQR relative to least squares.
    Efficiency(EfficiencyArgs),
}

/// Settings shared by `fit` and `select`. The lambda settings only apply
/// to `select`.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// TOML file with any of these settings (snake_case keys).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Input layout: csv (header row) or plasma (raw whitespace-separated
    /// plasma retinol file).
    #[arg(long)]
    pub format: Option<String>,

    /// Column roles, e.g. "u=age, x=dose, z=rest, y=response".
    #[arg(long)]
    pub roles: Option<String>,

    /// Categorical linear covariates, `col` or `col:reference`.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Option<Vec<String>>,

    /// Columns left out of `z=rest`.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Option<Vec<String>>,

    /// Center and scale the numeric covariates with training statistics.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,

    /// Include a baseline curve (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub baseline: Option<bool>,

    /// ls, qr or cqr (default cqr).
    #[arg(long)]
    pub method: Option<String>,

    /// Number of quantile levels for cqr (default 9).
    #[arg(long)]
    pub q: Option<usize>,

    /// Quantile level for qr (default 0.5).
    #[arg(long)]
    pub tau: Option<f64>,

    /// Smoothing kernel: epanechnikov, uniform or triangular.
    #[arg(long)]
    pub kernel: Option<String>,

    /// Fixed bandwidth; skips cross-validation.
    #[arg(long)]
    pub h: Option<f64>,

    /// Candidate bandwidths for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub h_grid: Option<Vec<f64>>,

    #[arg(long)]
    pub folds: Option<usize>,

    /// Seed for the fold assignment.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Leading rows used for fitting; the remaining rows are the test set.
    #[arg(long)]
    pub train_rows: Option<usize>,

    /// Points in the output curve grid.
    #[arg(long)]
    pub grid_points: Option<usize>,

    /// Explicit regularization values.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,

    #[arg(long)]
    pub lambda_points: Option<usize>,

    /// Span of the default grid: largest over smallest value.
    #[arg(long)]
    pub lambda_ratio: Option<f64>,

    /// Output directory (default vcplm-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),*) => {
        ModelArgs { config: $flags.config.clone(), $($field: $flags.$field.clone().or($file.$field.clone())),* }
    };
}

impl ModelArgs {
    /// Flags win over the config file, if any.
    pub fn merged(&self) -> CliResult<ModelArgs> {
        let Some(path) = &self.config else { return Ok(self.clone()) };
        let file: ModelArgs = read_toml(path)?;
        Ok(overlay!(
            self, file, data, format, roles, categorical, exclude, standardize, baseline, method, q, tau, kernel, h, h_grid,
            folds, seed, train_rows, grid_points, lambdas, lambda_points, lambda_ratio, out
        ))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct SimulateArgs {
    /// TOML file with simulation settings (keys as in the report metadata).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Simulation design, 1 (estimation) or 2 (selection).
    #[arg(long)]
    pub example: Option<u8>,

    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub reps: Option<usize>,

    /// Error distribution: normal, logistic, cauchy, t<df>, mixture, lognormal.
    #[arg(long)]
    pub dist: Option<String>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Least-squares bandwidth.
    #[arg(long)]
    pub h: Option<f64>,

    /// Convert h to each method's asymptotically optimal bandwidth.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub convert_bandwidths: Option<bool>,

    /// Stage-1 bandwidth h n^{-1/10}.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub undersmooth: Option<bool>,

    /// Estimate a baseline curve (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fit_baseline: Option<bool>,

    /// CQR levels; 0 disables CQR.
    #[arg(long)]
    pub q: Option<usize>,

    /// QR levels to run, e.g. 0.25,0.5,0.75; pass "none" for no QR.
    #[arg(long, value_delimiter = ',')]
    pub qr_levels: Option<Vec<String>>,

    #[arg(long)]
    pub lambda_points: Option<usize>,

    #[arg(long)]
    pub lambda_ratio: Option<f64>,

    #[arg(long)]
    pub grid_points: Option<usize>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct EfficiencyArgs {
    /// Distributions (default: all built-in).
    #[arg(long, value_delimiter = ',')]
    pub dist: Option<Vec<String>>,

    /// Numbers of quantile levels.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9,19,99")]
    pub q: Vec<usize>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
