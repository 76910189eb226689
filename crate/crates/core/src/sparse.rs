//! One-step sparse estimators with SCAD-derivative weights and BIC tuning.
//!
//! Given a pilot `beta0` and the stage-1 curves, the one-step estimator
//! minimizes the stage-2 loss plus `sum_j c p'_lambda(|beta0_j|) |beta_j|`,
//! with `c = n q` for the composite loss, `c = n` for a single level and
//! `c = n` for least squares (written as `RSS / 2`). Coefficients set to zero
//! are exact zeros.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local;
use crate::lp::{self, check_loss, SolveStatus};
use crate::model::{CurveSet, Dataset, QuantileGrid};

/// Concavity parameter commonly used for SCAD.
pub const SCAD_A: f64 = 3.7;

/// Smallest loss passed to `log` in the BIC.
pub const BIC_LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub a: f64,
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn new(lambda: f64, a: f64) -> Result<Self> {
        if !(a > 2.0) || !a.is_finite() {
            return Err(Error::InvalidConfig(format!("SCAD parameter a must exceed 2, got {a}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        Ok(Self { a, lambda })
    }

    pub fn scad(lambda: f64) -> Result<Self> {
        Self::new(lambda, SCAD_A)
    }

    pub fn derivative(&self, b: f64) -> f64 {
        scad_derivative(b, self.lambda, self.a)
    }
}

/// `p'_lambda(b)`: `lambda` for `b <= lambda`, `(a lambda - b)_+ / (a - 1)` beyond.
pub fn scad_derivative(b: f64, lambda: f64, a: f64) -> f64 {
    if b <= lambda {
        lambda
    } else {
        (a * lambda - b).max(0.0) / (a - 1.0)
    }
}

/// Loss of the one-step problem.
#[derive(Debug, Clone, PartialEq)]
pub enum SparseLoss {
    Cqr(QuantileGrid),
    Qr(f64),
    Ls,
}

impl SparseLoss {
    fn taus(&self) -> Vec<f64> {
        match self {
            SparseLoss::Cqr(g) => g.taus().to_vec(),
            SparseLoss::Qr(t) => vec![*t],
            SparseLoss::Ls => vec![],
        }
    }

    fn levels(&self) -> usize {
        match self {
            SparseLoss::Cqr(g) => g.q(),
            _ => 1,
        }
    }

    /// Multiplier `c` in front of the penalty.
    fn penalty_factor(&self, n: usize) -> f64 {
        n as f64 * self.levels() as f64
    }
}

/// One point of a regularization path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub df: usize,
    /// Unpenalized loss at `beta` (check loss or residual sum of squares).
    pub loss: f64,
    pub bic: f64,
    /// True when the loss was raised to [`BIC_LOSS_FLOOR`] before the log.
    pub loss_clamped: bool,
    /// Solver status; `None` for least squares that converged.
    pub status: Option<SolveStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub beta: Vec<f64>,
    /// Indices of the nonzero coefficients.
    pub selected: Vec<usize>,
    pub df: usize,
    pub bic: f64,
    pub lambda: f64,
    pub loss_clamped: bool,
    pub path: Vec<PathPoint>,
}

impl SelectionResult {
    fn from_path(path: Vec<PathPoint>, chosen: usize) -> Self {
        let p = &path[chosen];
        Self {
            beta: p.beta.clone(),
            selected: p.beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect(),
            df: p.df,
            bic: p.bic,
            lambda: p.lambda,
            loss_clamped: p.loss_clamped,
            path,
        }
    }
}

fn check_pilot(data: &Dataset, beta0: &[f64]) -> Result<()> {
    if beta0.len() != data.d2() {
        return Err(Error::DimensionMismatch(format!(
            "pilot has {} coefficients, z has {} columns",
            beta0.len(),
            data.d2()
        )));
    }
    if beta0.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidConfig("pilot coefficients must be finite".into()));
    }
    Ok(())
}

/// Per-coordinate penalty weights `c p'_lambda(|beta0_j|)`.
pub fn one_step_weights(beta0: &[f64], penalty: &PenaltySpec, factor: f64) -> Vec<f64> {
    beta0.iter().map(|b| factor * penalty.derivative(b.abs())).collect()
}

/// Prepared partial residuals for repeated one-step solves.
struct Prepared<'a> {
    data: &'a Dataset,
    resid: Vec<Vec<f64>>,
    loss: SparseLoss,
}

impl<'a> Prepared<'a> {
    fn new(data: &'a Dataset, curves: &CurveSet, loss: SparseLoss) -> Result<Self> {
        let resid = local::partial_residuals(data, curves, loss.levels())?;
        Ok(Self { data, resid, loss })
    }

    fn loss_at(&self, beta: &[f64]) -> f64 {
        let lin = self.data.linear_part(beta).expect("length checked");
        match &self.loss {
            SparseLoss::Ls => self.resid[0].iter().zip(&lin).map(|(r, l)| (r - l) * (r - l)).sum(),
            other => other
                .taus()
                .iter()
                .enumerate()
                .map(|(k, &t)| self.resid[k].iter().zip(&lin).map(|(r, l)| check_loss(r - l, t)).sum::<f64>())
                .sum(),
        }
    }

    fn bic(&self, loss: f64, df: usize) -> (f64, bool) {
        let n = self.data.n() as f64;
        let raw = match self.loss {
            SparseLoss::Ls => loss / n,
            _ => loss,
        };
        let clamped = raw < BIC_LOSS_FLOOR;
        (raw.max(BIC_LOSS_FLOOR).ln() + n.ln() / n * df as f64, clamped)
    }

    fn solve(&self, beta0: &[f64], penalty: &PenaltySpec) -> Result<PathPoint> {
        let d2 = self.data.d2();
        let weights = one_step_weights(beta0, penalty, self.loss.penalty_factor(self.data.n()));
        let (beta, status) = if d2 == 0 {
            (Vec::new(), None)
        } else {
            match &self.loss {
                SparseLoss::Ls => {
                    let (b, converged) = weighted_lasso(self.data, &self.resid[0], &weights);
                    (b, if converged { None } else { Some(SolveStatus::MaxIterations) })
                }
                other => {
                    let prob = local::global_problem(self.data, &self.resid, &other.taus())?
                        .expect("d2 > 0")
                        .with_penalty(weights.clone())?;
                    let sol = lp::solve(&prob)?;
                    let beta = snap_zeros(&prob, sol.coefficients, &weights);
                    (beta, Some(sol.status))
                }
            }
        };
        let df = beta.iter().filter(|b| **b != 0.0).count();
        let loss = self.loss_at(&beta);
        let (bic, loss_clamped) = self.bic(loss, df);
        Ok(PathPoint { lambda: penalty.lambda, beta, df, loss, bic, loss_clamped, status })
    }
}

/// Sets numerically negligible penalized coordinates to exact zero when that
/// does not raise the objective. Only matters when the solver returns an
/// interior iterate instead of a vertex.
fn snap_zeros(prob: &lp::PinballProblem, beta: Vec<f64>, weights: &[f64]) -> Vec<f64> {
    let scale = 1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let mut snapped = beta.clone();
    let mut changed = false;
    for (j, b) in snapped.iter_mut().enumerate() {
        if weights[j] > 0.0 && *b != 0.0 && b.abs() <= 1e-9 * scale {
            *b = 0.0;
            changed = true;
        }
    }
    if !changed {
        return beta;
    }
    let before = prob.objective(&beta);
    if prob.objective(&snapped) <= before + 1e-9 * (1.0 + before.abs()) {
        snapped
    } else {
        beta
    }
}

/// Coordinate descent for `RSS / 2 + sum_j w_j |b_j|`. Returns the
/// coefficients and whether the sweeps converged.
fn weighted_lasso(data: &Dataset, r: &[f64], weights: &[f64]) -> (Vec<f64>, bool) {
    let z = data.z();
    let (n, d2) = (data.n(), data.d2());
    let col_sq: Vec<f64> = (0..d2).map(|j| z.column(j).norm_squared()).collect();
    let mut beta = vec![0.0; d2];
    let mut resid = r.to_vec();
    let scale = 1.0 + r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..10_000 {
        let mut max_change = 0.0f64;
        for j in 0..d2 {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = beta[j];
            let rho: f64 = (0..n).map(|i| z[(i, j)] * resid[i]).sum::<f64>() + col_sq[j] * old;
            let new = soft_threshold(rho, weights[j]) / col_sq[j];
            if new != old {
                for i in 0..n {
                    resid[i] -= z[(i, j)] * (new - old);
                }
                beta[j] = new;
                max_change = max_change.max((new - old).abs() * col_sq[j].sqrt());
            }
        }
        if max_change <= 1e-13 * scale {
            return (beta, true);
        }
    }
    (beta, false)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// One-step estimator at a single `lambda`.
pub fn one_step_sparse(
    data: &Dataset,
    stage1_curves: &CurveSet,
    beta0: &[f64],
    loss: SparseLoss,
    lambda: f64,
) -> Result<SelectionResult> {
    check_pilot(data, beta0)?;
    let penalty = PenaltySpec::scad(lambda)?;
    let prep = Prepared::new(data, stage1_curves, loss)?;
    let point = prep.solve(beta0, &penalty)?;
    Ok(SelectionResult::from_path(vec![point], 0))
}

pub fn one_step_sparse_cqr(
    data: &Dataset,
    stage1_curves: &CurveSet,
    beta0: &[f64],
    qgrid: &QuantileGrid,
    lambda: f64,
) -> Result<SelectionResult> {
    one_step_sparse(data, stage1_curves, beta0, SparseLoss::Cqr(qgrid.clone()), lambda)
}

pub fn one_step_sparse_qr(
    data: &Dataset,
    stage1_curves: &CurveSet,
    beta0: &[f64],
    tau: f64,
    lambda: f64,
) -> Result<SelectionResult> {
    check_tau(tau)?;
    one_step_sparse(data, stage1_curves, beta0, SparseLoss::Qr(tau), lambda)
}

pub fn one_step_sparse_ls(data: &Dataset, curves: &CurveSet, beta0: &[f64], lambda: f64) -> Result<SelectionResult> {
    one_step_sparse(data, curves, beta0, SparseLoss::Ls, lambda)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("quantile level must lie in (0, 1), got {tau}")))
    }
}

/// Evaluates every `lambda` and returns the BIC minimizer; ties go to the
/// larger `lambda`. The path is reported in the order of `lambda_grid`.
pub fn bic_select_with(
    data: &Dataset,
    curves: &CurveSet,
    beta0: &[f64],
    loss: SparseLoss,
    lambda_grid: &[f64],
) -> Result<SelectionResult> {
    check_pilot(data, beta0)?;
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    if let SparseLoss::Qr(t) = loss {
        check_tau(t)?;
    }
    let penalties = lambda_grid.iter().map(|&l| PenaltySpec::scad(l)).collect::<Result<Vec<_>>>()?;
    let prep = Prepared::new(data, curves, loss)?;
    let path: Vec<PathPoint> = penalties.par_iter().map(|p| prep.solve(beta0, p)).collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..path.len()).collect();
    order.sort_by(|&a, &b| path[b].lambda.total_cmp(&path[a].lambda));
    let mut best = order[0];
    for &i in &order[1..] {
        if path[i].bic < path[best].bic - 1e-12 * (1.0 + path[best].bic.abs()) {
            best = i;
        }
    }
    Ok(SelectionResult::from_path(path, best))
}

/// BIC-tuned one-step composite quantile estimator.
pub fn bic_select(
    data: &Dataset,
    curves: &CurveSet,
    beta0: &[f64],
    qgrid: &QuantileGrid,
    lambda_grid: &[f64],
) -> Result<SelectionResult> {
    bic_select_with(data, curves, beta0, SparseLoss::Cqr(qgrid.clone()), lambda_grid)
}

/// Number of points in the default regularization grid.
pub const DEFAULT_LAMBDA_POINTS: usize = 50;

/// Smallest `lambda` at which every coefficient is guaranteed to be zero,
/// from the bound on the loss subgradient at `beta = 0`.
pub fn lambda_max(data: &Dataset, curves: &CurveSet, beta0: &[f64], loss: &SparseLoss) -> Result<f64> {
    check_pilot(data, beta0)?;
    let pilot = beta0.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let z = data.z();
    let n = data.n() as f64;
    let slope = match loss {
        SparseLoss::Ls => {
            let resid = local::partial_residuals(data, curves, 1)?;
            (0..data.d2())
                .map(|j| (0..data.n()).map(|i| z[(i, j)] * resid[0][i]).sum::<f64>().abs() / n)
                .fold(0.0, f64::max)
        }
        other => {
            let taus = other.taus();
            let tmax: f64 = taus.iter().map(|t| t.max(1.0 - t)).sum();
            (0..data.d2())
                .map(|j| z.column(j).iter().map(|v| v.abs()).sum::<f64>() * tmax / (n * taus.len() as f64))
                .fold(0.0, f64::max)
        }
    };
    Ok(pilot.max(slope))
}

/// `points` log-spaced values from `hi` down to `hi / ratio`.
pub fn log_grid(hi: f64, ratio: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..points)
            .map(|k| hi * ratio.powf(-(k as f64) / (points - 1) as f64))
            .collect(),
    }
}

/// Default grid: 50 log-spaced points from [`lambda_max`] down to a
/// thousandth of it.
pub fn default_lambda_grid(data: &Dataset, curves: &CurveSet, beta0: &[f64], loss: &SparseLoss) -> Result<Vec<f64>> {
    let hi = lambda_max(data, curves, beta0, loss)?;
    if hi == 0.0 {
        return Ok(vec![0.0]);
    }
    Ok(log_grid(hi, 1e3, DEFAULT_LAMBDA_POINTS))
}
