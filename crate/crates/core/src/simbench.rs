//! Simulation designs and the Monte Carlo harness.
//!
//! Design 1: `Y = sin(6 pi U) X1 + sin(2 pi U) X2 + 2 Z1 + Z2 + 0.5 Z3 + e`
//! with `(X1, X2, Z1, Z2)` equicorrelated normals (correlation 2/3),
//! `Z3 ~ Bernoulli(0.4)` and `U ~ U[0, 1]`, no baseline term.
//!
//! Design 2: same curves, `beta = (3, 1.5, 0, 0, 2, 0, 0, 0)` and a
//! ten-dimensional normal covariate vector with correlation `0.5^|i-j|`,
//! split as `(X1, X2, Z1..Z8)`. Used for variable selection.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::efficiency::{bandwidth_cqr, bandwidth_qr, DistKind, ErrorDist, QrBandwidthRule};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::local::undersmoothed_bandwidth;
use crate::model::{uniform_grid, CurveSet, Dataset, Method, DEFAULT_GRID_POINTS};
use crate::sparse;
use crate::tuning;

pub const EXAMPLE1_BETA: [f64; 3] = [2.0, 1.0, 0.5];
pub const EXAMPLE2_BETA: [f64; 8] = [3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];

/// Listed least-squares bandwidths (under, appropriate, over smoothing).
pub const LISTED_BANDWIDTHS: [f64; 3] = [0.085, 0.128, 0.192];

/// True varying coefficients `(sin 6 pi u, sin 2 pi u)`.
pub fn true_alpha(u: f64) -> [f64; 2] {
    use std::f64::consts::PI;
    [(6.0 * PI * u).sin(), (2.0 * PI * u).sin()]
}

pub fn true_beta(example: u8) -> Result<Vec<f64>> {
    match example {
        1 => Ok(EXAMPLE1_BETA.to_vec()),
        2 => Ok(EXAMPLE2_BETA.to_vec()),
        e => Err(Error::InvalidConfig(format!("example must be 1 or 2, got {e}"))),
    }
}

fn finish(
    u: Vec<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    beta: &[f64],
    dist: &ErrorDist,
    rng: &mut impl Rng,
) -> Dataset {
    let n = u.len();
    let y = (0..n)
        .map(|i| {
            let a = true_alpha(u[i]);
            let lin: f64 = (0..beta.len()).map(|j| z[(i, j)] * beta[j]).sum();
            a[0] * x[(i, 0)] + a[1] * x[(i, 1)] + lin + dist.sample(rng)
        })
        .collect();
    Dataset::new(u, x, z, y, false).expect("generated data is finite and consistent")
}

pub fn gen_example1(n: usize, dist: &ErrorDist, rng: &mut impl Rng) -> Dataset {
    let (a, b) = ((2.0f64 / 3.0).sqrt(), (1.0f64 / 3.0).sqrt());
    let mut u = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, 2);
    let mut z = DMatrix::zeros(n, 3);
    for i in 0..n {
        u.push(rng.random::<f64>());
        let f: f64 = rng.sample(StandardNormal);
        let mut v = [0.0; 4];
        for vk in &mut v {
            let e: f64 = rng.sample(StandardNormal);
            *vk = a * f + b * e;
        }
        x[(i, 0)] = v[0];
        x[(i, 1)] = v[1];
        z[(i, 0)] = v[2];
        z[(i, 1)] = v[3];
        z[(i, 2)] = if rng.random_bool(0.4) { 1.0 } else { 0.0 };
    }
    finish(u, x, z, &EXAMPLE1_BETA, dist, rng)
}

pub fn gen_example2(n: usize, dist: &ErrorDist, rng: &mut impl Rng) -> Dataset {
    let rho = 0.5f64;
    let innov = (1.0 - rho * rho).sqrt();
    let mut u = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, 2);
    let mut z = DMatrix::zeros(n, 8);
    for i in 0..n {
        u.push(rng.random::<f64>());
        let mut prev: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = prev;
        for k in 1..10 {
            let e: f64 = rng.sample(StandardNormal);
            prev = rho * prev + innov * e;
            if k < 2 {
                x[(i, k)] = prev;
            } else {
                z[(i, k - 2)] = prev;
            }
        }
    }
    finish(u, x, z, &EXAMPLE2_BETA, dist, rng)
}

pub fn generate(example: u8, n: usize, dist: &ErrorDist, rng: &mut impl Rng) -> Result<Dataset> {
    match example {
        1 => Ok(gen_example1(n, dist, rng)),
        2 => Ok(gen_example2(n, dist, rng)),
        e => Err(Error::InvalidConfig(format!("example must be 1 or 2, got {e}"))),
    }
}

/// Population second moment `E(Z Z')` of the linear covariates.
pub fn z_second_moment(example: u8) -> Result<DMatrix<f64>> {
    match example {
        1 => Ok(DMatrix::from_fn(3, 3, |i, j| match (i, j) {
            (2, 2) => 0.4,
            (2, _) | (_, 2) => 0.0,
            _ if i == j => 1.0,
            _ => 2.0 / 3.0,
        })),
        2 => Ok(DMatrix::from_fn(8, 8, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()))),
        e => Err(Error::InvalidConfig(format!("example must be 1 or 2, got {e}"))),
    }
}

/// Average squared error of the fitted curves over `grid`, summed over the
/// varying coefficients (and the baseline when `truth_baseline` is given).
pub fn ase(fit: &CurveSet, truth_alpha: &[Vec<f64>], truth_baseline: Option<&[f64]>, grid: &[f64]) -> Result<f64> {
    if fit.grid.len() != grid.len() || fit.grid.iter().zip(grid).any(|(a, b)| a != b) {
        return Err(Error::GridMismatch("fitted curves are not on the evaluation grid".into()));
    }
    if truth_alpha.len() != fit.d1() || truth_alpha.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::GridMismatch("true curves do not match the fitted curves".into()));
    }
    let mut total: f64 = fit
        .alpha
        .iter()
        .zip(truth_alpha)
        .flat_map(|(f, t)| f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    if let Some(base) = truth_baseline {
        if base.len() != grid.len() {
            return Err(Error::GridMismatch("true baseline length differs from grid".into()));
        }
        total += fit.baseline().iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / grid.len() as f64)
}

/// `ASE(LS) / ASE(method)`; two exact fits give 1.
pub fn rase(ase_ls: f64, ase_method: f64) -> f64 {
    if ase_ls == 0.0 && ase_method == 0.0 {
        1.0
    } else {
        ase_ls / ase_method
    }
}

/// `(b - beta)' M (b - beta)` for a positive semidefinite `M`.
pub fn gmse(beta_hat: &[f64], beta_true: &[f64], z_moment: &DMatrix<f64>) -> Result<f64> {
    let d = beta_true.len();
    if beta_hat.len() != d || z_moment.nrows() != d || z_moment.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries, truth {d}, moment matrix {}x{}",
            beta_hat.len(),
            z_moment.nrows(),
            z_moment.ncols()
        )));
    }
    if d > 0 {
        let sym = (z_moment + z_moment.transpose()) * 0.5;
        if (z_moment - &sym).amax() > 1e-12 * (1.0 + z_moment.amax()) {
            return Err(Error::NotPositiveSemidefinite);
        }
        let eig = sym.symmetric_eigenvalues();
        if eig.min() < -1e-12 * (1.0 + eig.amax()) {
            return Err(Error::NotPositiveSemidefinite);
        }
    }
    let e: Vec<f64> = beta_hat.iter().zip(beta_true).map(|(a, b)| a - b).collect();
    Ok((0..d).map(|i| (0..d).map(|j| e[i] * z_moment[(i, j)] * e[j]).sum::<f64>()).sum())
}

/// `GMSE(selected) / GMSE(full least squares)`; two exact fits give 1.
pub fn rgmse(gmse_selected: f64, gmse_full_ls: f64) -> f64 {
    if gmse_selected == 0.0 && gmse_full_ls == 0.0 {
        1.0
    } else {
        gmse_selected / gmse_full_ls
    }
}

/// Support-recovery summary over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub replications: usize,
    /// Average number of true zeros estimated as zero.
    pub correct_zeros: f64,
    /// Average number of true nonzeros estimated as zero.
    pub incorrect_zeros: f64,
    pub under_fit_count: usize,
    pub correct_fit_count: usize,
    pub over_fit_count: usize,
    pub under_fit: f64,
    pub correct_fit: f64,
    pub over_fit: f64,
}

pub fn selection_metrics(results: &[Vec<f64>], true_beta: &[f64]) -> Result<SelectionMetrics> {
    if let Some(b) = results.iter().find(|b| b.len() != true_beta.len()) {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} entries, truth {}",
            b.len(),
            true_beta.len()
        )));
    }
    let (mut c, mut ic) = (0usize, 0usize);
    let (mut under, mut correct, mut over) = (0usize, 0usize, 0usize);
    for b in results {
        let cz = b.iter().zip(true_beta).filter(|(e, t)| **t == 0.0 && **e == 0.0).count();
        let iz = b.iter().zip(true_beta).filter(|(e, t)| **t != 0.0 && **e == 0.0).count();
        let zeros = true_beta.iter().filter(|t| **t == 0.0).count();
        c += cz;
        ic += iz;
        if iz > 0 {
            under += 1;
        } else if cz == zeros {
            correct += 1;
        } else {
            over += 1;
        }
    }
    let r = results.len();
    let frac = |k: usize| if r == 0 { 0.0 } else { k as f64 / r as f64 };
    // the last nonempty class takes the remainder so the three sum to exactly 1
    let mut fits = [frac(under), frac(correct), frac(over)];
    if let Some(last) = [under, correct, over].iter().rposition(|&k| k > 0) {
        fits[last] = 1.0 - fits[..last].iter().sum::<f64>();
    }
    Ok(SelectionMetrics {
        replications: r,
        correct_zeros: frac(c),
        incorrect_zeros: frac(ic),
        under_fit_count: under,
        correct_fit_count: correct,
        over_fit_count: over,
        under_fit: fits[0],
        correct_fit: fits[1],
        over_fit: fits[2],
    })
}

/// Monte Carlo configuration. Least squares always runs as the reference
/// method; composite quantile regression runs when `q > 0`, plus one
/// quantile regression per entry of `qr_levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub example: u8,
    pub n: usize,
    pub reps: usize,
    /// Error distribution by name, e.g. `normal` or `t3`.
    pub dist: String,
    pub seed: u64,
    /// Least-squares bandwidth, used for every method unless converted.
    pub h: f64,
    /// Scale `h` per method by the asymptotically optimal ratio for `dist`.
    pub convert_bandwidths: bool,
    pub qr_bandwidth_rule: QrBandwidthRule,
    /// Stage-1 bandwidth `h n^{-1/10}` instead of `h`.
    pub undersmooth: bool,
    /// Estimate a baseline curve even though the true one is zero.
    pub fit_baseline: bool,
    pub q: usize,
    pub qr_levels: Vec<f64>,
    /// Regularization grid size and span (design 2).
    pub lambda_points: usize,
    pub lambda_ratio: f64,
    pub grid_points: usize,
    pub threads: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            example: 1,
            n: 200,
            reps: 100,
            dist: "normal".into(),
            seed: 20240101,
            h: 0.128,
            convert_bandwidths: false,
            qr_bandwidth_rule: QrBandwidthRule::default(),
            undersmooth: false,
            fit_baseline: true,
            q: 9,
            qr_levels: vec![0.25, 0.5, 0.75],
            lambda_points: sparse::DEFAULT_LAMBDA_POINTS,
            lambda_ratio: 1e3,
            grid_points: DEFAULT_GRID_POINTS,
            threads: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        true_beta(self.example)?;
        if self.n < 50 {
            return Err(Error::InvalidConfig(format!("n must be at least 50, got {}", self.n)));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("at least one replication is required".into()));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidBandwidth(self.h));
        }
        if let Some(t) = self.qr_levels.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::InvalidConfig(format!("quantile level must lie in (0, 1), got {t}")));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig("evaluation grid needs at least two points".into()));
        }
        if self.lambda_points == 0 || !(self.lambda_ratio >= 1.0) {
            return Err(Error::InvalidConfig("lambda grid needs points >= 1 and ratio >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        self.error_dist()?;
        Ok(())
    }

    pub fn error_dist(&self) -> Result<ErrorDist> {
        ErrorDist::from_name(&self.dist)
    }

    /// Methods in report order: LS, CQR, then the QR levels.
    pub fn methods(&self) -> Vec<Method> {
        let mut m = vec![Method::Ls];
        if self.q > 0 {
            m.push(Method::Cqr { q: self.q });
        }
        m.extend(self.qr_levels.iter().map(|&tau| Method::Qr { tau }));
        m
    }

    /// `(stage-1, stage-3)` bandwidths for `method`.
    pub fn bandwidths(&self, method: Method) -> Result<(f64, f64)> {
        let dist = self.error_dist()?;
        let h3 = match (method, self.convert_bandwidths) {
            (Method::Cqr { q }, true) => bandwidth_cqr(self.h, &dist, q)?,
            (Method::Qr { tau }, true) => bandwidth_qr(self.h, &dist, tau, self.qr_bandwidth_rule)?,
            _ => self.h,
        };
        let h1 = if self.undersmooth { undersmoothed_bandwidth(h3, self.n) } else { h3 };
        Ok((h1, h3))
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot start {t} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Replication `rep` draws from its own ChaCha stream of `seed`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// One method's output in one replication.
#[derive(Debug, Clone, PartialEq)]
struct MethodRep {
    beta: Vec<f64>,
    ase: Option<f64>,
    /// Design 2: GMSE of the selected model.
    gmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct RepOutcome {
    methods: Vec<std::result::Result<MethodRep, String>>,
    /// Design 2: GMSE of the unpenalized least-squares estimate.
    ls_full_gmse: Option<f64>,
}

fn fit_design1(cfg: &SimConfig, data: &Dataset, method: Method, grid: &[f64], truth: &[Vec<f64>]) -> Result<MethodRep> {
    let (h1, h3) = cfg.bandwidths(method)?;
    let fit = tuning::fit_method(data, method, h1, h3, KernelSpec::Epanechnikov, grid)?;
    let a = ase(&fit.curves, truth, None, grid)?;
    Ok(MethodRep { beta: fit.beta, ase: Some(a), gmse: None })
}

/// Pilot fit and BIC-tuned one-step estimate; also returns the pilot.
fn select_design2(cfg: &SimConfig, data: &Dataset, method: Method) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h1, _) = cfg.bandwidths(method)?;
    let (curves, pilot, loss) = tuning::pilot_fit(data, method, h1, KernelSpec::Epanechnikov)?;
    let hi = sparse::lambda_max(data, &curves, &pilot, &loss)?;
    let grid = if hi == 0.0 { vec![0.0] } else { sparse::log_grid(hi, cfg.lambda_ratio, cfg.lambda_points) };
    let sel = sparse::bic_select_with(data, &curves, &pilot, loss, &grid)?;
    Ok((sel.beta, pilot))
}

fn run_replication(cfg: &SimConfig, dist: &ErrorDist, rep: usize, grid: &[f64], truth: &[Vec<f64>]) -> RepOutcome {
    let mut rng = replication_rng(cfg.seed, rep);
    let data = generate(cfg.example, cfg.n, dist, &mut rng)
        .and_then(|d| d.with_baseline(cfg.fit_baseline))
        .expect("example validated");
    let methods = cfg.methods();
    if cfg.example == 1 {
        let out = methods
            .iter()
            .map(|&m| fit_design1(cfg, &data, m, grid, truth).map_err(|e| e.to_string()))
            .collect();
        return RepOutcome { methods: out, ls_full_gmse: None };
    }
    let moment = z_second_moment(2).expect("design 2 moment");
    let mut ls_full = None;
    let out = methods
        .iter()
        .map(|&m| {
            let (beta, pilot) = select_design2(cfg, &data, m).map_err(|e| e.to_string())?;
            if m == Method::Ls {
                ls_full = Some(gmse(&pilot, &EXAMPLE2_BETA, &moment).map_err(|e| e.to_string())?);
            }
            let g = gmse(&beta, &EXAMPLE2_BETA, &moment).map_err(|e| e.to_string())?;
            Ok(MethodRep { beta, ase: None, gmse: Some(g) })
        })
        .collect();
    RepOutcome { methods: out, ls_full_gmse: ls_full }
}

/// Mean and standard deviation (divisor `len - 1`); `NaN` SD for one value.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Median absolute deviation from the median, without a consistency factor.
pub fn mad(v: &[f64]) -> f64 {
    let med = median(v);
    let dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    median(&dev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub rgmse_median: f64,
    pub rgmse_mad: f64,
    pub metrics: SelectionMetrics,
}

/// Aggregates for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub label: String,
    pub successes: usize,
    pub failures: usize,
    /// Per coefficient, over successful replications.
    pub bias: Vec<f64>,
    pub sd: Vec<f64>,
    pub mse: Vec<f64>,
    /// `MSE(LS) / MSE(method)` per coefficient.
    pub rmse: Vec<f64>,
    /// `ASE(LS) / ASE(method)` over replications where both succeeded.
    pub rase_mean: Option<f64>,
    pub rase_sd: Option<f64>,
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub rep: usize,
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: SimConfig,
    pub true_beta: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<ReplicationFailure>,
}

pub fn run_monte_carlo(cfg: &SimConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let dist = cfg.error_dist()?;
    let grid = uniform_grid(0.0, 1.0, cfg.grid_points);
    let truth: Vec<Vec<f64>> = (0..2).map(|j| grid.iter().map(|&u| true_alpha(u)[j]).collect()).collect();
    let outcomes: Vec<RepOutcome> = with_threads(cfg.threads, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(cfg, &dist, rep, &grid, &truth))
            .collect()
    })?;
    Ok(aggregate(cfg, &dist, &outcomes))
}

fn aggregate(cfg: &SimConfig, dist: &ErrorDist, outcomes: &[RepOutcome]) -> BenchReport {
    let beta_true = true_beta(cfg.example).expect("validated");
    let methods = cfg.methods();
    let noiseless = dist.kind == DistKind::Noiseless;
    let mut failures = Vec::new();
    for (rep, o) in outcomes.iter().enumerate() {
        for (m, r) in methods.iter().zip(&o.methods) {
            if let Err(msg) = r {
                failures.push(ReplicationFailure { rep, method: m.label(), message: msg.clone() });
            }
        }
    }

    let moments = |k: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>, usize) {
        let betas: Vec<&Vec<f64>> = outcomes.iter().filter_map(|o| o.methods[k].as_ref().ok()).map(|r| &r.beta).collect();
        let d = beta_true.len();
        let mut bias = vec![f64::NAN; d];
        let mut sd = vec![f64::NAN; d];
        let mut mse = vec![f64::NAN; d];
        if !betas.is_empty() {
            for j in 0..d {
                let col: Vec<f64> = betas.iter().map(|b| b[j]).collect();
                let (mean, s) = mean_sd(&col);
                bias[j] = mean - beta_true[j];
                sd[j] = s;
                mse[j] = col.iter().map(|b| (b - beta_true[j]).powi(2)).sum::<f64>() / col.len() as f64;
            }
        }
        (bias, sd, mse, betas.len())
    };
    let (_, _, ls_mse, _) = moments(0);

    let summaries = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let (bias, sd, mse, successes) = moments(k);
            let rmse = if noiseless {
                vec![1.0; mse.len()]
            } else {
                ls_mse.iter().zip(&mse).map(|(l, m)| l / m).collect()
            };
            let (rase_mean, rase_sd) = if cfg.example == 1 {
                let r: Vec<f64> = outcomes
                    .iter()
                    .filter_map(|o| match (&o.methods[0], &o.methods[k]) {
                        (Ok(ls), Ok(me)) => Some(if noiseless { 1.0 } else { rase(ls.ase?, me.ase?) }),
                        _ => None,
                    })
                    .collect();
                let (m, s) = mean_sd(&r);
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            let selection = (cfg.example == 2).then(|| {
                let ok: Vec<&MethodRep> = outcomes.iter().filter_map(|o| o.methods[k].as_ref().ok()).collect();
                let ratios: Vec<f64> = outcomes
                    .iter()
                    .filter_map(|o| {
                        let me = o.methods[k].as_ref().ok()?;
                        let full = o.ls_full_gmse?;
                        Some(if noiseless { 1.0 } else { rgmse(me.gmse?, full) })
                    })
                    .collect();
                let betas: Vec<Vec<f64>> = ok.iter().map(|r| r.beta.clone()).collect();
                SelectionSummary {
                    rgmse_median: median(&ratios),
                    rgmse_mad: mad(&ratios),
                    metrics: selection_metrics(&betas, &beta_true).expect("dimensions agree"),
                }
            });
            MethodSummary {
                method,
                label: method.label(),
                successes,
                failures: outcomes.len() - successes,
                bias,
                sd,
                mse,
                rmse,
                rase_mean,
                rase_sd,
                selection,
            }
        })
        .collect();
    BenchReport { config: cfg.clone(), true_beta: beta_true, methods: summaries, failures }
}

impl BenchReport {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }

    /// `(method, metric, index, value)` records; `index` is the 1-based
    /// coefficient for per-coefficient metrics and empty otherwise.
    pub fn records(&self) -> Vec<(String, String, String, f64)> {
        let mut out = Vec::new();
        for m in &self.methods {
            let mut put = |metric: &str, idx: String, v: f64| out.push((m.label.clone(), metric.to_string(), idx, v));
            put("successes", String::new(), m.successes as f64);
            put("failures", String::new(), m.failures as f64);
            for (name, vals) in [("bias", &m.bias), ("sd", &m.sd), ("mse", &m.mse), ("rmse", &m.rmse)] {
                for (j, v) in vals.iter().enumerate() {
                    put(name, (j + 1).to_string(), *v);
                }
            }
            if let (Some(mean), Some(sd)) = (m.rase_mean, m.rase_sd) {
                put("rase_mean", String::new(), mean);
                put("rase_sd", String::new(), sd);
            }
            if let Some(s) = &m.selection {
                put("rgmse_median", String::new(), s.rgmse_median);
                put("rgmse_mad", String::new(), s.rgmse_mad);
                put("c", String::new(), s.metrics.correct_zeros);
                put("ic", String::new(), s.metrics.incorrect_zeros);
                put("under_fit", String::new(), s.metrics.under_fit);
                put("correct_fit", String::new(), s.metrics.correct_fit);
                put("over_fit", String::new(), s.metrics.over_fit);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,index,value\n");
        for (m, metric, idx, v) in self.records() {
            let _ = writeln!(s, "{m},{metric},{idx},{v}");
        }
        s
    }

    /// One `key = value` line per metric, preceded by the configuration.
    pub fn to_key_value(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "example = {}", c.example);
        let _ = writeln!(s, "n = {}", c.n);
        let _ = writeln!(s, "reps = {}", c.reps);
        let _ = writeln!(s, "dist = {}", c.dist);
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "h = {}", c.h);
        let _ = writeln!(s, "convert_bandwidths = {}", c.convert_bandwidths);
        let _ = writeln!(s, "undersmooth = {}", c.undersmooth);
        let _ = writeln!(s, "fit_baseline = {}", c.fit_baseline);
        let _ = writeln!(s, "q = {}", c.q);
        let _ = writeln!(s, "failed_fits = {}", self.failures.len());
        for (m, metric, idx, v) in self.records() {
            if idx.is_empty() {
                let _ = writeln!(s, "{m}.{metric} = {v}");
            } else {
                let _ = writeln!(s, "{m}.{metric}.beta{idx} = {v}");
            }
        }
        s
    }

    /// Plain-text tables laid out like the published summaries.
    pub fn table_text(&self) -> String {
        let mut s = String::new();
        let d = self.true_beta.len();
        let head: String = (1..=d).map(|j| format!("{:>20}", format!("beta{j}"))).collect();
        let _ = writeln!(s, "Bias (SD) over {} replications, dist = {}", self.config.reps, self.config.dist);
        let _ = writeln!(s, "{:<10}{head}", "method");
        for m in &self.methods {
            let cells: String = (0..d).map(|j| format!("{:>20}", format!("{:.3} ({:.3})", m.bias[j], m.sd[j]))).collect();
            let _ = writeln!(s, "{:<10}{cells}", m.label);
        }
        let _ = writeln!(s, "\nMSE ratio (LS / method)");
        let head: String = (1..=d).map(|j| format!("{:>12}", format!("beta{j}"))).collect();
        let _ = writeln!(s, "{:<10}{head}", "method");
        for m in self.methods.iter().skip(1) {
            let cells: String = m.rmse.iter().map(|v| format!("{v:>12.3}")).collect();
            let _ = writeln!(s, "{:<10}{cells}", m.label);
        }
        if self.config.example == 1 {
            let _ = writeln!(s, "\nRASE mean (SD)");
            for m in self.methods.iter().skip(1) {
                if let (Some(a), Some(b)) = (m.rase_mean, m.rase_sd) {
                    let _ = writeln!(s, "{:<10}{a:.3} ({b:.3})", m.label);
                }
            }
        } else {
            let _ = writeln!(
                s,
                "\n{:<10}{:>16}{:>8}{:>8}{:>8}{:>8}{:>8}",
                "method", "RGMSE med(MAD)", "C", "IC", "U-fit", "C-fit", "O-fit"
            );
            for m in &self.methods {
                if let Some(sel) = &m.selection {
                    let t = &sel.metrics;
                    let _ = writeln!(
                        s,
                        "{:<10}{:>16}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
                        m.label,
                        format!("{:.3} ({:.3})", sel.rgmse_median, sel.rgmse_mad),
                        t.correct_zeros,
                        t.incorrect_zeros,
                        t.under_fit,
                        t.correct_fit,
                        t.over_fit
                    );
                }
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\n{} failed fits", self.failures.len());
        }
        s
    }
}
