//! Local linear designs and the stage drivers shared by the quantile,
//! composite-quantile and least-squares estimators.
//!
//! A local design around `u0` has columns
//! `[intercepts, (u - u0), x, x (u - u0), z]` where the intercept block holds
//! one indicator per quantile level. The intercept block is present when the
//! model has a baseline or when more than one level is fitted (the level
//! intercepts then carry the error quantiles); the `(u - u0)` column is
//! present only with a baseline. The `z` block is used in stage 1 only.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{checked_local_weights, min_local_observations, KernelSpec};
use crate::lp::{self, PinballProblem, SolveStatus};
use crate::model::{CurveSet, Dataset, EvalMode, FitDiagnostics, Method, SemiFit, StageObjectives};

/// Loss used by a three-stage fit.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Loss {
    /// Composite check loss over these levels (a single level is plain QR).
    Pinball(Vec<f64>),
    Squared,
}

impl Loss {
    fn levels(&self) -> usize {
        match self {
            Loss::Pinball(t) => t.len(),
            Loss::Squared => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub intercepts: usize,
    pub baseline_slope: bool,
    pub d1: usize,
    pub d2: usize,
}

impl Layout {
    pub fn new(include_baseline: bool, levels: usize, d1: usize, d2: usize) -> Self {
        Self {
            intercepts: if include_baseline || levels > 1 { levels } else { 0 },
            baseline_slope: include_baseline,
            d1,
            d2,
        }
    }

    pub fn p(&self) -> usize {
        self.intercepts + self.baseline_slope as usize + 2 * self.d1 + self.d2
    }

    fn fill(&self, buf: &mut [f64], level: usize, du: f64, data: &Dataset, i: usize) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        let mut c = 0;
        if self.intercepts > 0 {
            buf[level] = 1.0;
            c = self.intercepts;
        }
        if self.baseline_slope {
            buf[c] = du;
            c += 1;
        }
        let x = data.x();
        for j in 0..self.d1 {
            buf[c + j] = x[(i, j)];
            buf[c + self.d1 + j] = x[(i, j)] * du;
        }
        c += 2 * self.d1;
        let z = data.z();
        for j in 0..self.d2 {
            buf[c + j] = z[(i, j)];
        }
    }
}

/// Coefficients of one local fit around `u0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub u0: f64,
    /// Level-specific intercepts; empty when the design has none.
    pub intercepts: Vec<f64>,
    /// Local slope of the baseline; zero without a baseline.
    pub baseline_slope: f64,
    pub alpha: Vec<f64>,
    pub alpha_slope: Vec<f64>,
    /// Local linear coefficients; empty when `z` is not in the design.
    pub beta: Vec<f64>,
    pub objective: f64,
    /// LP status; `None` for least-squares fits.
    pub status: Option<SolveStatus>,
}

impl LocalFit {
    fn from_coefficients(layout: &Layout, u0: f64, c: &[f64], objective: f64, status: Option<SolveStatus>) -> Self {
        let mut at = 0;
        let intercepts = c[..layout.intercepts].to_vec();
        at += layout.intercepts;
        let baseline_slope = if layout.baseline_slope {
            at += 1;
            c[at - 1]
        } else {
            0.0
        };
        let alpha = c[at..at + layout.d1].to_vec();
        let alpha_slope = c[at + layout.d1..at + 2 * layout.d1].to_vec();
        at += 2 * layout.d1;
        let beta = c[at..at + layout.d2].to_vec();
        Self { u0, intercepts, baseline_slope, alpha, alpha_slope, beta, objective, status }
    }
}

fn window(data: &Dataset, u0: f64, h: f64, kernel: KernelSpec, d2: usize) -> Result<Vec<(usize, f64)>> {
    let required = min_local_observations(data.d1(), d2);
    let w = checked_local_weights(kernel, data.u(), u0, h, required)?;
    Ok(w.into_iter().enumerate().filter(|(_, v)| *v > 0.0).collect())
}

/// Local linear fit of `response` around `u0`.
pub(crate) fn local_fit(
    data: &Dataset,
    response: &[f64],
    u0: f64,
    loss: &Loss,
    h: f64,
    kernel: KernelSpec,
    with_z: bool,
) -> Result<LocalFit> {
    let d2 = if with_z { data.d2() } else { 0 };
    let layout = Layout::new(data.include_baseline(), loss.levels(), data.d1(), d2);
    let rows = window(data, u0, h, kernel, d2)?;
    match loss {
        Loss::Pinball(taus) => {
            let prob = pinball_window(data, response, u0, taus, &layout, &rows)?;
            let sol = lp::solve(&prob)?;
            Ok(LocalFit::from_coefficients(&layout, u0, &sol.coefficients, sol.objective, Some(sol.status)))
        }
        Loss::Squared => {
            let (p, u) = (layout.p(), data.u());
            let mut buf = vec![0.0; p];
            let m = rows.len();
            let mut a = DMatrix::zeros(m, p);
            let mut b = DVector::zeros(m);
            for (r, &(i, w)) in rows.iter().enumerate() {
                layout.fill(&mut buf, 0, u[i] - u0, data, i);
                let sw = w.sqrt();
                for c in 0..p {
                    a[(r, c)] = sw * buf[c];
                }
                b[r] = sw * response[i];
            }
            let coef = least_squares(&a, &b).ok_or(Error::InsufficientLocalData {
                point: u0,
                available: m,
                required: p,
            })?;
            let resid = &b - &a * DVector::from_column_slice(&coef);
            Ok(LocalFit::from_coefficients(&layout, u0, &coef, resid.norm_squared(), None))
        }
    }
}

fn pinball_window(
    data: &Dataset,
    response: &[f64],
    u0: f64,
    taus: &[f64],
    layout: &Layout,
    rows: &[(usize, f64)],
) -> Result<PinballProblem> {
    let p = layout.p();
    let u = data.u();
    let mut buf = vec![0.0; p];
    let mut prob = PinballProblem::with_capacity(p, rows.len() * taus.len());
    for &(i, w) in rows {
        for (k, &tau) in taus.iter().enumerate() {
            layout.fill(&mut buf, k, u[i] - u0, data, i);
            prob.push_row(&buf, response[i], tau, w)?;
        }
    }
    Ok(prob)
}

/// The local composite check-loss problem solved by [`local_fit`].
#[cfg(test)]
pub(crate) fn local_pinball_problem(
    data: &Dataset,
    response: &[f64],
    u0: f64,
    taus: &[f64],
    h: f64,
    kernel: KernelSpec,
    with_z: bool,
) -> Result<PinballProblem> {
    let d2 = if with_z { data.d2() } else { 0 };
    let layout = Layout::new(data.include_baseline(), taus.len(), data.d1(), d2);
    let rows = window(data, u0, h, kernel, d2)?;
    pinball_window(data, response, u0, taus, &layout, &rows)
}

/// Least-squares solution of `a x = b` through a QR factorization; `None`
/// when `a` is numerically rank deficient.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<Vec<f64>> {
    let (m, p) = a.shape();
    if m < p {
        return None;
    }
    if p == 0 {
        return Some(Vec::new());
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * scale) {
        return None;
    }
    let qtb = qr.q().transpose() * b;
    let x = r.solve_upper_triangular(&qtb)?;
    Some(x.iter().copied().collect())
}

fn count_status(diag: &mut FitDiagnostics, status: Option<SolveStatus>) {
    match status {
        Some(SolveStatus::Degenerate) => diag.degenerate_solves += 1,
        Some(SolveStatus::MaxIterations) => diag.unconverged_solves += 1,
        _ => {}
    }
}

/// Stage 1: local fits with `z` at every observation point.
pub(crate) struct StageOne {
    pub curves: CurveSet,
    pub fits: Vec<LocalFit>,
    pub initial_beta: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

pub(crate) fn stage_one(data: &Dataset, loss: &Loss, h: f64, kernel: KernelSpec) -> Result<StageOne> {
    let fits: Vec<LocalFit> = data
        .u()
        .par_iter()
        .map(|&u0| local_fit(data, data.y(), u0, loss, h, kernel, true))
        .collect::<Result<_>>()?;
    let curves = curves_from_fits(data.u().to_vec(), &fits, data.d1(), EvalMode::AtObservations)?;
    let mut diagnostics = FitDiagnostics::default();
    for f in &fits {
        count_status(&mut diagnostics, f.status);
        if f.intercepts.windows(2).any(|w| w[1] < w[0]) {
            diagnostics.intercept_crossings += 1;
        }
    }
    let n = fits.len() as f64;
    let initial_beta = (0..data.d2()).map(|j| fits.iter().map(|f| f.beta[j]).sum::<f64>() / n).collect();
    Ok(StageOne { curves, fits, initial_beta, diagnostics })
}

fn curves_from_fits(grid: Vec<f64>, fits: &[LocalFit], d1: usize, mode: EvalMode) -> Result<CurveSet> {
    let levels = fits.first().map_or(0, |f| f.intercepts.len());
    let alpha0_k = if levels == 0 {
        vec![vec![0.0; fits.len()]]
    } else {
        (0..levels).map(|k| fits.iter().map(|f| f.intercepts[k]).collect()).collect()
    };
    let alpha = (0..d1).map(|j| fits.iter().map(|f| f.alpha[j]).collect()).collect();
    CurveSet::new(grid, alpha0_k, alpha, mode)
}

/// Per-level intercepts `[k][i]` and coefficient curves `[j][i]` at the
/// observation points. Observation-order curves of matching length are used
/// directly; anything else is interpolated (extrapolation is an error).
pub(crate) fn curves_at_observations(data: &Dataset, curves: &CurveSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if curves.d1() != data.d1() {
        return Err(Error::DimensionMismatch(format!(
            "curves have {} coefficient functions, data has {} varying covariates",
            curves.d1(),
            data.d1()
        )));
    }
    if curves.mode == EvalMode::AtObservations && curves.grid.as_slice() == data.u() {
        return Ok((curves.alpha0_k.clone(), curves.alpha.clone()));
    }
    let (lo, hi) = (curves.grid.iter().cloned().fold(f64::INFINITY, f64::min), curves.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let mut a0 = vec![Vec::with_capacity(data.n()); curves.q()];
    let mut al = vec![Vec::with_capacity(data.n()); curves.d1()];
    for &u0 in data.u() {
        if !(u0 >= lo && u0 <= hi) {
            return Err(Error::ExtrapolationRefused { point: u0, lo, hi });
        }
        for (k, v) in curves.intercepts_clamped(u0).into_iter().enumerate() {
            a0[k].push(v);
        }
        let (vals, _) = curves.evaluate_clamped(u0);
        for j in 0..curves.d1() {
            al[j].push(vals[1 + j]);
        }
    }
    Ok((a0, al))
}

/// Responses `y_i - a0k(U_i) - x_i' a(U_i)` for each level `k`.
pub(crate) fn partial_residuals(data: &Dataset, curves: &CurveSet, levels: usize) -> Result<Vec<Vec<f64>>> {
    let (a0, al) = curves_at_observations(data, curves)?;
    if a0.len() != levels {
        return Err(Error::DimensionMismatch(format!(
            "curves carry {} intercept levels, fit uses {levels}",
            a0.len()
        )));
    }
    let x = data.x();
    Ok((0..levels)
        .map(|k| {
            (0..data.n())
                .map(|i| {
                    let xa: f64 = (0..data.d1()).map(|j| x[(i, j)] * al[j][i]).sum();
                    data.y()[i] - a0[k][i] - xa
                })
                .collect()
        })
        .collect())
}

/// Stage-2 style global problem in `beta` over the partial residuals, with
/// unit weights. `None` when there are no linear covariates.
pub(crate) fn global_problem(data: &Dataset, resid: &[Vec<f64>], taus: &[f64]) -> Result<Option<PinballProblem>> {
    let d2 = data.d2();
    if d2 == 0 {
        return Ok(None);
    }
    let z = data.z();
    let mut prob = PinballProblem::with_capacity(d2, data.n() * taus.len());
    let mut buf = vec![0.0; d2];
    for (k, &tau) in taus.iter().enumerate() {
        for i in 0..data.n() {
            for j in 0..d2 {
                buf[j] = z[(i, j)];
            }
            prob.push_row(&buf, resid[k][i], tau, 1.0)?;
        }
    }
    Ok(Some(prob))
}

/// Result of the global refinement of the linear coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedBeta {
    pub beta: Vec<f64>,
    /// Composite check loss (or residual sum of squares) at `beta`.
    pub objective: f64,
    /// LP status; `None` for least squares or when there is nothing to solve.
    pub status: Option<SolveStatus>,
}

pub(crate) fn stage_two(data: &Dataset, curves: &CurveSet, loss: &Loss) -> Result<RefinedBeta> {
    let resid = partial_residuals(data, curves, loss.levels())?;
    match loss {
        Loss::Pinball(taus) => match global_problem(data, &resid, taus)? {
            Some(prob) => {
                let sol = lp::solve(&prob)?;
                Ok(RefinedBeta { beta: sol.coefficients, objective: sol.objective, status: Some(sol.status) })
            }
            None => {
                let objective = taus
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| resid[k].iter().map(|&r| lp::check_loss(r, t)).sum::<f64>())
                    .sum();
                Ok(RefinedBeta { beta: Vec::new(), objective, status: None })
            }
        },
        Loss::Squared => {
            let r = DVector::from_column_slice(&resid[0]);
            let z = data.z().clone();
            let beta = least_squares(&z, &r)
                .ok_or_else(|| Error::Singular("linear covariates are collinear".into()))?;
            let rss = (&r - &z * DVector::from_column_slice(&beta)).norm_squared();
            Ok(RefinedBeta { beta, objective: rss, status: None })
        }
    }
}

/// Stage 3: local fits of `y - z' beta` on the output grid.
pub(crate) struct StageThree {
    pub curves: CurveSet,
    pub objectives: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

pub(crate) fn stage_three(
    data: &Dataset,
    beta: &[f64],
    loss: &Loss,
    h: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<StageThree> {
    let lin = data.linear_part(beta)?;
    let response: Vec<f64> = data.y().iter().zip(&lin).map(|(y, l)| y - l).collect();
    let fits: Vec<LocalFit> = grid
        .par_iter()
        .map(|&u0| local_fit(data, &response, u0, loss, h, kernel, false))
        .collect::<Result<_>>()?;
    let curves = curves_from_fits(grid.to_vec(), &fits, data.d1(), EvalMode::OnGrid)?;
    let mut diagnostics = FitDiagnostics::default();
    for f in &fits {
        count_status(&mut diagnostics, f.status);
    }
    Ok(StageThree { curves, objectives: fits.iter().map(|f| f.objective).collect(), diagnostics })
}

/// Runs all three stages and assembles the fit.
pub(crate) fn fit_three_stage(
    data: &Dataset,
    loss: &Loss,
    method: Method,
    h1: f64,
    h3: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<SemiFit> {
    check_bandwidths(h1, h3)?;
    let one = stage_one(data, loss, h1, kernel)?;
    let two = stage_two(data, &one.curves, loss)?;
    let three = stage_three(data, &two.beta, loss, h3, kernel, grid)?;
    let mut diagnostics = one.diagnostics.clone();
    count_status(&mut diagnostics, two.status);
    diagnostics.degenerate_solves += three.diagnostics.degenerate_solves;
    diagnostics.unconverged_solves += three.diagnostics.unconverged_solves;
    let (q, tau) = match method {
        Method::Qr { tau } => (1, Some(tau)),
        Method::Cqr { q } => (q, None),
        Method::Ls => (1, None),
    };
    Ok(SemiFit {
        method,
        curves: three.curves,
        stage1_curves: one.curves,
        beta: two.beta,
        initial_beta: one.initial_beta,
        q,
        tau,
        h_stage1: h1,
        h_stage3: h3,
        objectives: StageObjectives {
            stage1: one.fits.iter().map(|f| f.objective).collect(),
            stage2: two.objective,
            stage3: three.objectives,
        },
        diagnostics,
    })
}

pub(crate) fn check_bandwidths(h1: f64, h3: f64) -> Result<()> {
    for h in [h1, h3] {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidBandwidth(h));
        }
    }
    Ok(())
}

/// Stage-1 bandwidth `h3 n^{-1/10}` for undersmoothing.
pub fn undersmoothed_bandwidth(h3: f64, n: usize) -> f64 {
    h3 * (n as f64).powf(-0.1)
}

/// Uniform output grid of [`DEFAULT_GRID_POINTS`](crate::model::DEFAULT_GRID_POINTS) points over the observed range of `u`.
pub fn default_grid(data: &Dataset) -> Vec<f64> {
    let (lo, hi) = data.u_range();
    crate::model::uniform_grid(lo, hi, crate::model::DEFAULT_GRID_POINTS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_columns() {
        // baseline, q = 9, d1 = 2, d2 = 3: q + 1 + 2 d1 + d2
        assert_eq!(Layout::new(true, 9, 2, 3).p(), 9 + 1 + 4 + 3);
        // no baseline, one level: no intercept column at all
        assert_eq!(Layout::new(false, 1, 2, 3).p(), 7);
        // no baseline, several levels: level intercepts without a slope
        assert_eq!(Layout::new(false, 9, 2, 3).p(), 16);
    }

    #[test]
    fn least_squares_detects_rank_deficiency() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(least_squares(&a, &DVector::from_vec(vec![1.0, 2.0, 3.0])).is_none());
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let x = least_squares(&a, &DVector::from_vec(vec![1.0, 3.0, 5.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn undersmoothing_factor() {
        assert!((undersmoothed_bandwidth(0.128, 200) - 0.128 * 200f64.powf(-0.1)).abs() < 1e-15);
    }
}
