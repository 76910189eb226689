//! Core domain types: observation blocks, quantile grids, fitted curves and
//! complete three-stage fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample `(u, X, Z, y)` from `Y = a0(U) + X'a(U) + Z'b + e`.
///
/// `x` is `n x d1` (varying-coefficient covariates) and `z` is `n x d2`
/// (linear covariates). Either may have zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    u: Vec<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: Vec<f64>,
    include_baseline: bool,
}

impl Dataset {
    pub fn new(
        u: Vec<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y: Vec<f64>,
        include_baseline: bool,
    ) -> Result<Self> {
        let n = u.len();
        if n == 0 {
            return Err(Error::InvalidDataset("no observations".into()));
        }
        if y.len() != n || x.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "u has {n} entries, y has {}, x has {} rows, z has {} rows",
                y.len(),
                x.nrows(),
                z.nrows()
            )));
        }
        if !include_baseline && x.ncols() == 0 && z.ncols() == 0 {
            return Err(Error::InvalidDataset(
                "model has no baseline, no varying coefficients and no linear part".into(),
            ));
        }
        let finite = u.iter().chain(y.iter()).chain(x.iter()).chain(z.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidDataset("non-finite value in data".into()));
        }
        Ok(Self { u, x, z, y, include_baseline })
    }

    /// Builds a dataset from row-major covariate slices.
    pub fn from_rows(
        u: Vec<f64>,
        x_rows: &[Vec<f64>],
        z_rows: &[Vec<f64>],
        y: Vec<f64>,
        include_baseline: bool,
    ) -> Result<Self> {
        let n = u.len();
        let x = rows_to_matrix(n, x_rows, "x")?;
        let z = rows_to_matrix(n, z_rows, "z")?;
        Self::new(u, x, z, y, include_baseline)
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn d1(&self) -> usize {
        self.x.ncols()
    }

    pub fn d2(&self) -> usize {
        self.z.ncols()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn include_baseline(&self) -> bool {
        self.include_baseline
    }

    /// Observed range of the index variable.
    pub fn u_range(&self) -> (f64, f64) {
        self.u
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same covariates, new response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.u.clone(), self.x.clone(), self.z.clone(), y, self.include_baseline)
    }

    /// Same observations with the baseline term switched on or off.
    pub fn with_baseline(&self, include_baseline: bool) -> Result<Self> {
        Self::new(self.u.clone(), self.x.clone(), self.z.clone(), self.y.clone(), include_baseline)
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let u = idx.iter().map(|&i| self.u[i]).collect();
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let x = self.x.select_rows(idx);
        let z = self.z.select_rows(idx);
        Self::new(u, x, z, y, self.include_baseline)
    }

    /// `z_i' beta` for every observation.
    pub fn linear_part(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.d2() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries, z has {} columns",
                beta.len(),
                self.d2()
            )));
        }
        Ok((0..self.n())
            .map(|i| (0..self.d2()).map(|j| self.z[(i, j)] * beta[j]).sum())
            .collect())
    }
}

fn rows_to_matrix(n: usize, rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(n, 0));
    }
    if rows.len() != n {
        return Err(Error::DimensionMismatch(format!("{name} has {} rows, expected {n}", rows.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!("{name} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Equispaced quantile levels `tau_k = k / (q + 1)`, `k = 1..q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    q: usize,
    taus: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidConfig("q must be at least 1".into()));
        }
        let taus = (1..=q).map(|k| k as f64 / (q + 1) as f64).collect();
        Ok(Self { q, taus })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }
}

/// Where a [`CurveSet`] was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    AtObservations,
    OnGrid,
}

/// Fitted coefficient functions.
///
/// `alpha0_k[k][m]` is the intercept of quantile level `k` at `grid[m]`
/// (baseline plus the error quantile). Fits without an intercept column
/// store a single row of zeros. `alpha[j][m]` is the j-th varying
/// coefficient at `grid[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub grid: Vec<f64>,
    pub alpha0_k: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub mode: EvalMode,
}

impl CurveSet {
    pub fn new(
        grid: Vec<f64>,
        alpha0_k: Vec<Vec<f64>>,
        alpha: Vec<Vec<f64>>,
        mode: EvalMode,
    ) -> Result<Self> {
        let m = grid.len();
        if m == 0 {
            return Err(Error::GridMismatch("empty grid".into()));
        }
        if alpha0_k.is_empty() {
            return Err(Error::GridMismatch("at least one intercept curve is required".into()));
        }
        if alpha0_k.iter().chain(alpha.iter()).any(|c| c.len() != m) {
            return Err(Error::GridMismatch("curve length differs from grid length".into()));
        }
        if mode == EvalMode::OnGrid && grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::GridMismatch("output grid must be nondecreasing".into()));
        }
        Ok(Self { grid, alpha0_k, alpha, mode })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn q(&self) -> usize {
        self.alpha0_k.len()
    }

    pub fn d1(&self) -> usize {
        self.alpha.len()
    }

    /// Quantile-averaged intercept, i.e. the baseline estimate.
    pub fn baseline(&self) -> Vec<f64> {
        let q = self.q() as f64;
        (0..self.len())
            .map(|m| self.alpha0_k.iter().map(|c| c[m]).sum::<f64>() / q)
            .collect()
    }

    /// `[baseline, alpha_1, .., alpha_d1]` at the m-th stored point.
    pub fn values_at_index(&self, m: usize) -> Vec<f64> {
        let q = self.q() as f64;
        let mut out = Vec::with_capacity(1 + self.d1());
        out.push(self.alpha0_k.iter().map(|c| c[m]).sum::<f64>() / q);
        out.extend(self.alpha.iter().map(|c| c[m]));
        out
    }

    /// Linear interpolation of `[baseline, alpha_1, .., alpha_d1]` at `u0`.
    pub fn evaluate(&self, u0: f64) -> Result<Vec<f64>> {
        let (lo, hi, t) = self.locate(u0)?;
        Ok(self.blend(lo, hi, t))
    }

    /// Like [`evaluate`](Self::evaluate) but points outside the grid take
    /// the nearest endpoint value. The flag reports whether clamping occurred.
    pub fn evaluate_clamped(&self, u0: f64) -> (Vec<f64>, bool) {
        let (a, b) = self.hull();
        let clamped = u0 < a || u0 > b;
        let (lo, hi, t) = self.locate(u0.clamp(a, b)).expect("clamped point lies in hull");
        (self.blend(lo, hi, t), clamped)
    }

    /// Per-quantile intercepts interpolated at `u0` (clamped to the hull).
    pub fn intercepts_clamped(&self, u0: f64) -> Vec<f64> {
        let (a, b) = self.hull();
        let (lo, hi, t) = self.locate(u0.clamp(a, b)).expect("clamped point lies in hull");
        self.alpha0_k.iter().map(|c| c[lo] + t * (c[hi] - c[lo])).collect()
    }

    fn hull(&self) -> (f64, f64) {
        self.grid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn blend(&self, lo: usize, hi: usize, t: f64) -> Vec<f64> {
        let q = self.q() as f64;
        let mut out = Vec::with_capacity(1 + self.d1());
        out.push(self.alpha0_k.iter().map(|c| c[lo] + t * (c[hi] - c[lo])).sum::<f64>() / q);
        out.extend(self.alpha.iter().map(|c| c[lo] + t * (c[hi] - c[lo])));
        out
    }

    /// Indices of the bracketing stored points and the blend factor.
    fn locate(&self, u0: f64) -> Result<(usize, usize, f64)> {
        let (a, b) = self.hull();
        if !(u0 >= a && u0 <= b) {
            return Err(Error::ExtrapolationRefused { point: u0, lo: a, hi: b });
        }
        let order: Vec<usize> = match self.mode {
            EvalMode::OnGrid => (0..self.len()).collect(),
            EvalMode::AtObservations => {
                let mut idx: Vec<usize> = (0..self.len()).collect();
                idx.sort_by(|&i, &j| self.grid[i].total_cmp(&self.grid[j]));
                idx
            }
        };
        let pos = order.partition_point(|&i| self.grid[i] < u0);
        if pos < order.len() && self.grid[order[pos]] == u0 {
            return Ok((order[pos], order[pos], 0.0));
        }
        // u0 is strictly inside (grid[order[pos-1]], grid[order[pos]])
        let (lo, hi) = (order[pos - 1], order[pos]);
        let t = (u0 - self.grid[lo]) / (self.grid[hi] - self.grid[lo]);
        Ok((lo, hi, t))
    }
}

/// Free-function form of [`CurveSet::evaluate`].
pub fn evaluate_curveset(curves: &CurveSet, u0: f64) -> Result<Vec<f64>> {
    curves.evaluate(u0)
}

/// `m` uniformly spaced points spanning `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect(),
    }
}

/// Default number of output grid points.
pub const DEFAULT_GRID_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    /// Single-level quantile regression.
    Qr { tau: f64 },
    /// Composite quantile regression over `q` equispaced levels.
    Cqr { q: usize },
    /// Least-squares analogue.
    Ls,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Qr { tau } => format!("QR{tau:.2}"),
            Method::Cqr { q } => format!("CQR{q}"),
            Method::Ls => "LS".to_string(),
        }
    }
}

/// Objective values reached by each stage's solves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageObjectives {
    /// One entry per observation point.
    pub stage1: Vec<f64>,
    pub stage2: f64,
    /// One entry per output grid point.
    pub stage3: Vec<f64>,
}

/// Counters for solves that did not end in a clean optimum.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FitDiagnostics {
    pub degenerate_solves: usize,
    pub unconverged_solves: usize,
    /// Windows where the stage-1 quantile intercepts are not nondecreasing.
    pub intercept_crossings: usize,
}

/// Complete three-stage estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiFit {
    pub method: Method,
    /// Refined curves on the output grid.
    pub curves: CurveSet,
    /// Initial curves at the observation points.
    pub stage1_curves: CurveSet,
    /// Refined linear coefficients.
    pub beta: Vec<f64>,
    /// Average of the local linear coefficients from stage 1.
    pub initial_beta: Vec<f64>,
    pub q: usize,
    pub tau: Option<f64>,
    pub h_stage1: f64,
    pub h_stage3: f64,
    pub objectives: StageObjectives,
    pub diagnostics: FitDiagnostics,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(grid: Vec<f64>, vals: Vec<f64>) -> CurveSet {
        // put the curve in the intercept slot; baseline == the curve itself
        CurveSet::new(grid, vec![vals], vec![], EvalMode::OnGrid).unwrap()
    }

    #[test]
    fn midpoint_interpolation() {
        let c = line(vec![0.0, 1.0], vec![0.0, 2.0]);
        assert_eq!(evaluate_curveset(&c, 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn constant_curve() {
        let c = line(vec![0.0, 1.0], vec![3.0, 3.0]);
        assert_eq!(c.evaluate(0.7).unwrap(), vec![3.0]);
    }

    #[test]
    fn interpolation_on_second_segment() {
        let c = line(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 4.0]);
        assert!((c.evaluate(0.75).unwrap()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn exact_at_grid_points() {
        let grid = vec![0.0, 0.1, 0.35, 0.9];
        let a0 = vec![1.0, -2.0, 0.3, 7.0];
        let a1 = vec![0.25, 0.5, 0.75, 1.0];
        let c = CurveSet::new(grid.clone(), vec![a0.clone()], vec![a1.clone()], EvalMode::OnGrid).unwrap();
        for (m, &g) in grid.iter().enumerate() {
            assert_eq!(c.evaluate(g).unwrap(), vec![a0[m], a1[m]]);
        }
    }

    #[test]
    fn refuses_extrapolation() {
        let c = line(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!(matches!(c.evaluate(1.5), Err(Error::ExtrapolationRefused { .. })));
        let (v, clamped) = c.evaluate_clamped(1.5);
        assert!(clamped);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn observation_order_curves_interpolate_after_sorting() {
        let c = CurveSet::new(vec![1.0, 0.0, 0.5], vec![vec![4.0, 0.0, 1.0]], vec![], EvalMode::AtObservations)
            .unwrap();
        assert!((c.evaluate(0.75).unwrap()[0] - 2.5).abs() < 1e-15);
        assert_eq!(c.evaluate(1.0).unwrap(), vec![4.0]);
    }

    #[test]
    fn baseline_averages_quantile_intercepts() {
        let c = CurveSet::new(vec![0.0], vec![vec![-1.0], vec![0.0], vec![4.0]], vec![], EvalMode::OnGrid).unwrap();
        assert_eq!(c.baseline(), vec![1.0]);
    }

    #[test]
    fn dataset_rejects_mismatched_lengths() {
        let r = Dataset::from_rows(vec![0.1, 0.2], &[], &[vec![1.0]], vec![1.0, 2.0], true);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
        let r = Dataset::from_rows(vec![0.1, 0.2], &[], &[], vec![1.0], true);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn dataset_needs_some_model_component() {
        let r = Dataset::from_rows(vec![0.1], &[], &[], vec![1.0], false);
        assert!(matches!(r, Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn quantile_grid_levels() {
        let g = QuantileGrid::new(9).unwrap();
        for (k, &t) in g.taus().iter().enumerate() {
            assert_eq!(t, (k + 1) as f64 / 10.0);
        }
        assert!(g.taus().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(QuantileGrid::new(1).unwrap().taus(), &[0.5]);
    }
}
