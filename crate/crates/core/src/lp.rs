//! Weighted composite check-loss minimization.
//!
//! Every estimator stage reduces to
//!
//! ```text
//! minimize  sum_i w_i * rho_{tau_i}(y_i - x_i' b)  +  sum_j lambda_j * |b_j|
//! ```
//!
//! which is solved by a Frisch-Newton primal-dual interior point method on
//! the bounded dual `max y'd  s.t.  X'd = 0,  tau_i - 1 <= d_i <= tau_i`,
//! written in the shifted variables `a = d + 1 - tau` so that `0 <= a <= 1`
//! and `a = 1 - tau` is a feasible interior start.
//!
//! L1 penalties enter as extra rows: `lambda_j |b_j|` equals the check loss
//! at `tau = 1/2` with weight `2 lambda_j` of a row with response 0 and
//! feature vector `e_j`.
//!
//! After the interior point phase the iterate is moved to a vertex of the
//! optimal face (the `p` rows with smallest residuals, refitted exactly).
//! Penalty rows in that basis pin their coefficient to an exact `0.0`. The
//! basis duals then certify optimality and flag flat optimal faces.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `rho_tau(r) = tau r - r 1(r < 0)`.
#[inline]
pub fn check_loss(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

/// Borrowed view of one row of a [`PinballProblem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinballRow<'a> {
    pub features: &'a [f64],
    pub response: f64,
    pub tau: f64,
    pub weight: f64,
}

/// Rows of `(features, response, tau, weight)` with optional per-coordinate
/// L1 penalty weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PinballProblem {
    p: usize,
    features: Vec<f64>,
    response: Vec<f64>,
    tau: Vec<f64>,
    weight: Vec<f64>,
    penalty: Option<Vec<f64>>,
}

impl PinballProblem {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            features: Vec::new(),
            response: Vec::new(),
            tau: Vec::new(),
            weight: Vec::new(),
            penalty: None,
        }
    }

    pub fn with_capacity(p: usize, rows: usize) -> Self {
        Self {
            p,
            features: Vec::with_capacity(p * rows),
            response: Vec::with_capacity(rows),
            tau: Vec::with_capacity(rows),
            weight: Vec::with_capacity(rows),
            penalty: None,
        }
    }

    pub fn push_row(&mut self, features: &[f64], response: f64, tau: f64, weight: f64) -> Result<()> {
        if features.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "row has {} features, problem has {}",
                features.len(),
                self.p
            )));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidProblem(format!("quantile level {tau} outside (0, 1)")));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidProblem(format!("row weight {weight} must be finite and >= 0")));
        }
        if !response.is_finite() || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite row data".into()));
        }
        self.features.extend_from_slice(features);
        self.response.push(response);
        self.tau.push(tau);
        self.weight.push(weight);
        Ok(())
    }

    /// Sets per-coordinate L1 weights; zero leaves a coordinate unpenalized.
    pub fn set_penalty(&mut self, penalty: Vec<f64>) -> Result<()> {
        if penalty.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "penalty has {} weights, problem has {} coefficients",
                penalty.len(),
                self.p
            )));
        }
        if penalty.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidProblem("penalty weights must be finite and >= 0".into()));
        }
        self.penalty = Some(penalty);
        Ok(())
    }

    pub fn with_penalty(mut self, penalty: Vec<f64>) -> Result<Self> {
        self.set_penalty(penalty)?;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn penalty(&self) -> Option<&[f64]> {
        self.penalty.as_deref()
    }

    pub fn row(&self, i: usize) -> PinballRow<'_> {
        PinballRow {
            features: &self.features[i * self.p..(i + 1) * self.p],
            response: self.response[i],
            tau: self.tau[i],
            weight: self.weight[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = PinballRow<'_>> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Check-loss part of the objective.
    pub fn loss(&self, coefs: &[f64]) -> f64 {
        self.rows()
            .map(|r| {
                let fit: f64 = r.features.iter().zip(coefs).map(|(a, b)| a * b).sum();
                r.weight * check_loss(r.response - fit, r.tau)
            })
            .sum()
    }

    /// Full objective including the penalty.
    pub fn objective(&self, coefs: &[f64]) -> f64 {
        let pen: f64 = match &self.penalty {
            Some(l) => l.iter().zip(coefs).map(|(l, b)| l * b.abs()).sum(),
            None => 0.0,
        };
        self.loss(coefs) + pen
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidProblem("problem has no coefficients".into()));
        }
        if self.is_empty() {
            return Err(Error::InvalidProblem("problem has no rows".into()));
        }
        if !self.weight.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidProblem("no row carries positive weight".into()));
        }
        Ok(())
    }

    /// Positive-weight rows plus one pseudo-row per penalized coordinate.
    fn expanded(&self) -> Expanded {
        let p = self.p;
        let mut ex = Expanded { p, ..Default::default() };
        for i in 0..self.len() {
            let w = self.weight[i];
            if w > 0.0 {
                let r = self.row(i);
                ex.raw.extend_from_slice(r.features);
                ex.response.push(r.response);
                ex.tau.push(r.tau);
                ex.weight.push(w);
                ex.pinned.push(None);
            }
        }
        if let Some(pen) = &self.penalty {
            for (j, &l) in pen.iter().enumerate() {
                if l > 0.0 {
                    let mut e = vec![0.0; p];
                    e[j] = 1.0;
                    ex.raw.extend_from_slice(&e);
                    ex.response.push(0.0);
                    ex.tau.push(0.5);
                    ex.weight.push(2.0 * l);
                    ex.pinned.push(Some(j));
                }
            }
        }
        ex
    }
}

#[derive(Debug, Default)]
struct Expanded {
    p: usize,
    raw: Vec<f64>,
    response: Vec<f64>,
    tau: Vec<f64>,
    weight: Vec<f64>,
    /// `Some(j)` marks the penalty pseudo-row of coordinate `j`.
    pinned: Vec<Option<usize>>,
}

impl Expanded {
    fn m(&self) -> usize {
        self.response.len()
    }

    fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.p..(i + 1) * self.p]
    }

    fn residual(&self, i: usize, b: &[f64]) -> f64 {
        self.response[i] - dot(self.raw_row(i), b)
    }

    fn objective(&self, b: &[f64]) -> f64 {
        (0..self.m()).map(|i| self.weight[i] * check_loss(self.residual(i, b), self.tau[i])).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Iteration limit reached; the best iterate is returned.
    MaxIterations,
    /// Optimal face is not a single point, or the active design is rank deficient.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinballSolution {
    pub coefficients: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub duality_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative duality gap at which the interior point phase stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step-length damping toward the boundary.
    pub step_damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 200, step_damping: 0.99995 }
    }
}

/// Minimizes the penalized weighted check loss with default options.
pub fn solve(problem: &PinballProblem) -> Result<PinballSolution> {
    solve_with(problem, &SolverOptions::default())
}

pub fn solve_with(problem: &PinballProblem, opts: &SolverOptions) -> Result<PinballSolution> {
    problem.validate()?;
    let mut ex = problem.expanded();
    // solve in centered units of the response range, so that tolerances and
    // the interior path do not depend on the response scale or, when the
    // features span a constant, on its location
    let (lo, hi) = ex
        .response
        .iter()
        .zip(&ex.pinned)
        .filter(|(_, p)| p.is_none())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&r, _)| (lo.min(r), hi.max(r)));
    let range = hi - lo;
    let scale = if range > 0.0 && range.is_finite() { range } else { 1.0 };
    let shift = intercept_direction(&ex).map(|v| (0.5 * (lo + hi), v)).filter(|(c, _)| c.is_finite());
    for (r, p) in ex.response.iter_mut().zip(&ex.pinned) {
        if p.is_none() {
            if let Some((c, _)) = &shift {
                *r -= c;
            }
            *r /= scale;
        }
    }
    let mut sol = solve_expanded(&ex, opts);
    for b in &mut sol.coefficients {
        *b *= scale;
    }
    if let Some((c, v)) = &shift {
        for (b, vj) in sol.coefficients.iter_mut().zip(v) {
            *b += c * vj;
        }
    }
    sol.objective = problem.objective(&sol.coefficients);
    sol.duality_gap *= scale;
    Ok(sol)
}

fn solve_expanded(ex: &Expanded, opts: &SolverOptions) -> PinballSolution {
    let ipm = interior_point(ex, opts);
    let ipm_objective = ex.objective(&ipm.beta);

    let tie_tol = 1e-9 * (1.0 + ipm_objective.abs());
    let mut status = if ipm.converged { SolveStatus::Optimal } else { SolveStatus::MaxIterations };

    let vertex = vertex_from_iterate(ex, &ipm.beta).map(|v| {
        let certified = matches!(basis_certificate(ex, &v), Some(Certificate { feasible: true, .. }));
        if certified {
            v
        } else {
            polish_vertex(ex, v)
        }
    });
    match vertex {
        Some(v) => {
            let obj = ex.objective(&v.beta);
            if obj <= ipm_objective + tie_tol {
                let cert = basis_certificate(ex, &v);
                let gap = match &cert {
                    Some(c) if c.feasible => (obj - c.dual_objective).abs(),
                    _ => ipm.gap,
                };
                status = match cert {
                    // an exact vertex with a feasible dual is optimal regardless of IPM convergence
                    Some(Certificate { feasible: true, flat: false, .. }) => SolveStatus::Optimal,
                    Some(Certificate { feasible: true, flat: true, .. }) => SolveStatus::Degenerate,
                    _ if status == SolveStatus::Optimal => SolveStatus::Degenerate,
                    _ => status,
                };
                return PinballSolution {
                    coefficients: v.beta,
                    objective: obj,
                    status,
                    iterations: ipm.iterations,
                    duality_gap: gap,
                };
            }
            // the rounded vertex lies off the optimal face: the iterate sits inside a flat face
            if status == SolveStatus::Optimal {
                status = SolveStatus::Degenerate;
            }
        }
        None => {
            if status == SolveStatus::Optimal {
                status = SolveStatus::Degenerate;
            }
        }
    }
    PinballSolution {
        coefficients: ipm.beta,
        objective: ipm_objective,
        status,
        iterations: ipm.iterations,
        duality_gap: ipm.gap,
    }
}

/// Coefficient direction `v` with `x_i' v = 1` on every data row and no
/// weight on penalized coordinates, if the features span a constant.
fn intercept_direction(ex: &Expanded) -> Option<Vec<f64>> {
    let p = ex.p;
    let rows: Vec<usize> = (0..ex.m()).filter(|&i| ex.pinned[i].is_none()).collect();
    if rows.is_empty() {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for &i in &rows {
        let x = ex.raw_row(i);
        for j in 0..p {
            b[j] += x[j];
            for k in 0..p {
                a[(j, k)] += x[j] * x[k];
            }
        }
    }
    let v = a.svd(true, true).solve(&b, 1e-10).ok()?;
    // one-hot level columns give integer directions; keep them exact
    let snapped: Vec<f64> = v.iter().map(|x| if (x - x.round()).abs() < 1e-9 { x.round() } else { *x }).collect();
    let fits = |v: &[f64]| rows.iter().all(|&i| (dot(ex.raw_row(i), v) - 1.0).abs() <= 1e-10);
    let v = if fits(&snapped) { snapped } else { v.iter().copied().collect() };
    if !fits(&v) {
        return None;
    }
    let penalized = ex.pinned.iter().flatten().any(|&j| v[j] != 0.0);
    (!penalized).then_some(v)
}

struct IpmOutcome {
    beta: Vec<f64>,
    iterations: usize,
    gap: f64,
    converged: bool,
}

/// Largest step keeping `v + step * dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(1e20, f64::min)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_i q_i a_i a_i'` and Cholesky-solves against it. A relative ridge of
/// 1e-10 is added, escalated only if the factorization fails.
struct NormalEquations {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NormalEquations {
    fn build(a: &[f64], p: usize, q: &[f64]) -> Option<Self> {
        let mut m = DMatrix::<f64>::zeros(p, p);
        for (i, &qi) in q.iter().enumerate() {
            let row = &a[i * p..(i + 1) * p];
            for j in 0..p {
                let v = qi * row[j];
                if v == 0.0 {
                    continue;
                }
                for k in j..p {
                    m[(j, k)] += v * row[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                m[(j, k)] = m[(k, j)];
            }
        }
        let scale = (0..p).map(|j| m[(j, j)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut ridge = 1e-10 * scale;
        for _ in 0..6 {
            let mut mm = m.clone();
            for j in 0..p {
                mm[(j, j)] += ridge;
            }
            if let Some(chol) = mm.cholesky() {
                return Some(Self { chol });
            }
            ridge *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: Vec<f64>) -> Vec<f64> {
        self.chol.solve(&DVector::from_vec(rhs)).data.into()
    }
}

fn interior_point(ex: &Expanded, opts: &SolverOptions) -> IpmOutcome {
    let (m, p) = (ex.m(), ex.p);
    // scaled design a_i = w_i x_i and cost c_i = -w_i y_i
    let mut a = vec![0.0; m * p];
    let mut c = vec![0.0; m];
    for i in 0..m {
        let w = ex.weight[i];
        for (dst, src) in a[i * p..(i + 1) * p].iter_mut().zip(ex.raw_row(i)) {
            *dst = w * src;
        }
        c[i] = -w * ex.response[i];
    }
    let row = |i: usize| &a[i * p..(i + 1) * p];

    let mut x: Vec<f64> = ex.tau.iter().map(|t| 1.0 - t).collect();
    let mut s: Vec<f64> = ex.tau.clone();
    let mut b = vec![0.0; p];
    for i in 0..m {
        for (bj, aij) in b.iter_mut().zip(row(i)) {
            *bj += x[i] * aij;
        }
    }

    let ones = vec![1.0; m];
    let Some(ne) = NormalEquations::build(&a, p, &ones) else {
        return IpmOutcome { beta: vec![0.0; p], iterations: 0, gap: f64::INFINITY, converged: false };
    };
    let mut rhs = vec![0.0; p];
    for i in 0..m {
        for (rj, aij) in rhs.iter_mut().zip(row(i)) {
            *rj += c[i] * aij;
        }
    }
    let mut yd = ne.solve(rhs);

    let c_scale = (c.iter().map(|v| v.abs()).sum::<f64>() / m as f64).max(1e-12);
    let mut z = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m {
        let mut r = c[i] - dot(row(i), &yd);
        if r == 0.0 {
            r = 1e-3 * c_scale;
        }
        z[i] = r.max(0.0);
        w[i] = (-r).max(0.0);
    }

    let b_scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let c_inf = 1.0 + c.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let beta_damp = opts.step_damping;

    let mut dx = vec![0.0; m];
    let mut ds = vec![0.0; m];
    let mut dz = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut q = vec![0.0; m];
    let mut r = vec![0.0; m];
    let mut rho = vec![0.0; m];
    // primal residual b - A'x and dual residual c - A y - z + w
    let mut rp = vec![0.0; p];
    let mut rd = vec![0.0; m];

    let mut iterations = 0;
    let mut converged = false;
    let mut gap;
    loop {
        rp.copy_from_slice(&b);
        for i in 0..m {
            for (rj, aij) in rp.iter_mut().zip(row(i)) {
                *rj -= x[i] * aij;
            }
            rd[i] = c[i] - dot(row(i), &yd) - z[i] + w[i];
        }
        gap = dot(&x, &z) + dot(&s, &w);
        let scale = 1.0 + dot(&c, &x).abs();
        let feasible = rp.iter().all(|v| v.abs() <= 1e-6 * b_scale) && rd.iter().all(|v| v.abs() <= 1e-6 * c_inf);
        if gap <= opts.tolerance * scale && feasible {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        for i in 0..m {
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
            r[i] = z[i] - w[i];
        }
        let Some(ne) = NormalEquations::build(&a, p, &q) else { break };

        // affine-scaling predictor
        let mut rhs = rp.clone();
        for i in 0..m {
            let f = q[i] * (r[i] + rd[i]);
            for (rj, aij) in rhs.iter_mut().zip(row(i)) {
                *rj += f * aij;
            }
        }
        let mut dy = ne.solve(rhs);
        for i in 0..m {
            dx[i] = q[i] * (dot(row(i), &dy) - r[i] - rd[i]);
            ds[i] = -dx[i];
            dz[i] = -z[i] * (dx[i] / x[i] + 1.0);
            dw[i] = -w[i] * (ds[i] / s[i] + 1.0);
        }
        let mut fp = (beta_damp * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
        let mut fd = (beta_damp * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);

        if fp.min(fd) < 1.0 {
            // Mehrotra corrector with centering
            let mu0 = dot(&z, &x) + dot(&w, &s);
            let mut g = 0.0;
            for i in 0..m {
                g += (z[i] + fd * dz[i]) * (x[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i]);
            }
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * m as f64);

            let mut rhs = rp.clone();
            for i in 0..m {
                rho[i] = mu / x[i] - mu / s[i] - r[i] - rd[i] - dx[i] * dz[i] / x[i] + ds[i] * dw[i] / s[i];
                let f = -q[i] * rho[i];
                for (rj, aij) in rhs.iter_mut().zip(row(i)) {
                    *rj += f * aij;
                }
            }
            dy = ne.solve(rhs);
            for i in 0..m {
                let cross_x = dx[i] * dz[i];
                let cross_s = ds[i] * dw[i];
                let ndx = q[i] * (dot(row(i), &dy) + rho[i]);
                let nds = -ndx;
                dz[i] = (mu - x[i] * z[i] - cross_x - z[i] * ndx) / x[i];
                dw[i] = (mu - s[i] * w[i] - cross_s - w[i] * nds) / s[i];
                dx[i] = ndx;
                ds[i] = nds;
            }
            fp = (beta_damp * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
            fd = (beta_damp * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);
        }

        let next = |v: &[f64], d: &[f64], f: f64| -> Vec<f64> { v.iter().zip(d).map(|(a, b)| a + f * b).collect() };
        let (nx, ns, nz, nw) = (next(&x, &dx, fp), next(&s, &ds, fp), next(&z, &dz, fd), next(&w, &dw, fd));
        let ny = next(&yd, &dy, fd);
        let sound = (0..m).all(|i| {
            nx[i] > 0.0
                && ns[i] > 0.0
                && nz[i] >= 0.0
                && nw[i] >= 0.0
                && (nz[i] / nx[i] + nw[i] / ns[i]) > 0.0
                && (nz[i] / nx[i] + nw[i] / ns[i]).is_finite()
        });
        if !sound || ny.iter().any(|t| !t.is_finite()) {
            // the step underflowed; keep the last sound iterate
            break;
        }
        (x, s, z, w, yd) = (nx, ns, nz, nw, ny);
    }
    IpmOutcome { beta: yd.iter().map(|v| -v).collect(), iterations, gap, converged }
}

struct Vertex {
    beta: Vec<f64>,
    basis: Vec<usize>,
}

/// Picks `p` linearly independent rows in order of increasing residual and
/// interpolates them exactly.
fn vertex_from_iterate(ex: &Expanded, beta: &[f64]) -> Option<Vertex> {
    let p = ex.p;
    let m = ex.m();
    let mut order: Vec<(f64, usize)> = (0..m)
        .map(|i| (ex.residual(i, beta).abs() / (1.0 + ex.response[i].abs()), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for &(_, i) in &order {
        let xi = ex.raw_row(i);
        let norm = dot(xi, xi).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = xi.iter().map(|t| t / norm).collect();
        for _ in 0..2 {
            for e in &ortho {
                let proj = dot(&v, e);
                for (vk, ek) in v.iter_mut().zip(e) {
                    *vk -= proj * ek;
                }
            }
        }
        let vn = dot(&v, &v).sqrt();
        if vn > 1e-7 {
            ortho.push(v.iter().map(|t| t / vn).collect());
            basis.push(i);
            if basis.len() == p {
                break;
            }
        }
    }
    if basis.len() < p {
        return None;
    }
    let beta = interpolate_basis(ex, &basis)?;
    Some(Vertex { beta, basis })
}

/// Solves `x_h' b = y_h` over the basis; penalty rows pin their coordinate to 0.
fn interpolate_basis(ex: &Expanded, basis: &[usize]) -> Option<Vec<f64>> {
    let p = ex.p;
    let pinned: Vec<usize> = basis.iter().filter_map(|&i| ex.pinned[i]).collect();
    let free: Vec<usize> = (0..p).filter(|j| !pinned.contains(j)).collect();
    let data_rows: Vec<usize> = basis.iter().copied().filter(|&i| ex.pinned[i].is_none()).collect();
    let mut beta = vec![0.0; p];
    if free.is_empty() {
        return Some(beta);
    }
    if data_rows.len() != free.len() {
        return None;
    }
    let k = free.len();
    let mat = DMatrix::from_fn(k, k, |r, c| ex.raw_row(data_rows[r])[free[c]]);
    let rhs = DVector::from_iterator(k, data_rows.iter().map(|&i| ex.response[i]));
    let sol = mat.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (c, &j) in free.iter().enumerate() {
        beta[j] = sol[c];
    }
    Some(beta)
}

/// Primal simplex steps from a vertex until its basis certificate is dual
/// feasible. Each step frees the basic row with the worst dual violation
/// and moves to the breakpoint where the objective stops decreasing.
fn polish_vertex(ex: &Expanded, start: Vertex) -> Vertex {
    let p = ex.p;
    let m = ex.m();
    let mut v = start;
    for _ in 0..(20 * p + 50) {
        let Some(duals) = basic_duals(ex, &v) else { break };
        let mut order: Vec<(f64, usize, bool)> = v
            .basis
            .iter()
            .enumerate()
            .filter_map(|(c, &h)| {
                let (lo, hi) = (ex.tau[h] - 1.0, ex.tau[h]);
                let d = duals[c];
                if d > hi + 1e-9 {
                    Some((d - hi, c, true))
                } else if d < lo - 1e-9 {
                    Some((lo - d, c, false))
                } else {
                    None
                }
            })
            .collect();
        if order.is_empty() {
            break;
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mat = DMatrix::from_fn(p, p, |r, c| ex.raw_row(v.basis[r])[c]);
        let Some(lu_inv) = mat.try_inverse() else { break };
        let mut moved = false;
        for &(_, c, raise) in &order {
            let h = v.basis[c];
            // direction with x_h' delta = -1 (raise the residual of h) or +1
            let sign = if raise { -1.0 } else { 1.0 };
            let delta: Vec<f64> = (0..p).map(|j| sign * lu_inv[(j, c)]).collect();
            let rate_h = if raise { ex.tau[h] } else { 1.0 - ex.tau[h] };
            let mut slope = ex.weight[h] * rate_h;
            let mut breaks: Vec<(f64, f64, usize)> = Vec::new();
            for i in 0..m {
                if v.basis.contains(&i) {
                    continue;
                }
                let a = dot(ex.raw_row(i), &delta);
                if a == 0.0 {
                    continue;
                }
                let r = ex.residual(i, &v.beta);
                // residual along the ray is r - t a
                let d = if r > 0.0 || (r == 0.0 && a < 0.0) { ex.tau[i] } else { ex.tau[i] - 1.0 };
                slope -= ex.weight[i] * d * a;
                let t = r / a;
                if r != 0.0 && t > 0.0 {
                    breaks.push((t, ex.weight[i] * a.abs(), i));
                }
            }
            if slope >= -1e-12 * ex.weight[h] {
                continue;
            }
            breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            let mut entering = None;
            for &(_, jump, i) in &breaks {
                slope += jump;
                if slope >= 0.0 {
                    entering = Some(i);
                    break;
                }
            }
            let Some(i) = entering else { continue };
            let mut basis = v.basis.clone();
            basis[c] = i;
            if let Some(beta) = interpolate_basis(ex, &basis) {
                if ex.objective(&beta) <= ex.objective(&v.beta) {
                    v = Vertex { beta, basis };
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }
    v
}

/// Dual values of the basic rows implied by the basis.
fn basic_duals(ex: &Expanded, v: &Vertex) -> Option<Vec<f64>> {
    let p = ex.p;
    let mut in_basis = vec![false; ex.m()];
    for &i in &v.basis {
        in_basis[i] = true;
    }
    let mut rhs = DVector::<f64>::zeros(p);
    for i in (0..ex.m()).filter(|&i| !in_basis[i]) {
        let res = ex.residual(i, &v.beta);
        let d = if res > 0.0 {
            ex.tau[i]
        } else if res < 0.0 {
            ex.tau[i] - 1.0
        } else {
            ex.tau[i] - 0.5
        };
        for (j, &xij) in ex.raw_row(i).iter().enumerate() {
            rhs[j] -= ex.weight[i] * xij * d;
        }
    }
    let mat = DMatrix::from_fn(p, p, |j, c| {
        let i = v.basis[c];
        ex.weight[i] * ex.raw_row(i)[j]
    });
    let dh = mat.lu().solve(&rhs)?;
    Some(dh.iter().copied().collect())
}

struct Certificate {
    feasible: bool,
    flat: bool,
    dual_objective: f64,
}

/// Dual values implied by the basis: non-basic rows sit at the bound given by
/// the sign of their residual; basic rows solve the stationarity system.
fn basis_certificate(ex: &Expanded, v: &Vertex) -> Option<Certificate> {
    let p = ex.p;
    let m = ex.m();
    let in_basis = {
        let mut flags = vec![false; m];
        for &i in &v.basis {
            flags[i] = true;
        }
        flags
    };
    let mut tie = false;
    let mut rhs = DVector::<f64>::zeros(p);
    let mut dual_objective = 0.0;
    for i in 0..m {
        if in_basis[i] {
            continue;
        }
        let res = ex.residual(i, &v.beta);
        let d = if res > 0.0 {
            ex.tau[i]
        } else if res < 0.0 {
            ex.tau[i] - 1.0
        } else {
            tie = true;
            ex.tau[i] - 0.5
        };
        let wi = ex.weight[i];
        for (j, &xij) in ex.raw_row(i).iter().enumerate() {
            rhs[j] -= wi * xij * d;
        }
        dual_objective += wi * ex.response[i] * d;
    }
    let mat = DMatrix::from_fn(p, p, |j, c| {
        let i = v.basis[c];
        ex.weight[i] * ex.raw_row(i)[j]
    });
    let dh = mat.lu().solve(&rhs)?;
    let mut feasible = true;
    let mut flat = tie;
    for (c, &i) in v.basis.iter().enumerate() {
        let d = dh[c];
        let (lo, hi) = (ex.tau[i] - 1.0, ex.tau[i]);
        if d < lo - 1e-7 || d > hi + 1e-7 {
            feasible = false;
        }
        if (d - lo).abs() < 1e-6 || (hi - d).abs() < 1e-6 {
            flat = true;
        }
        dual_objective += ex.weight[i] * ex.response[i] * d;
    }
    Some(Certificate { feasible, flat, dual_objective })
}

/// Size limits for [`brute_force_oracle_with_limits`].
pub const ORACLE_MAX_P: usize = 3;
pub const ORACLE_MAX_ROWS: usize = 25;

/// Exact optimum by enumerating every basic solution. Test oracle only.
pub fn brute_force_oracle(problem: &PinballProblem) -> Result<PinballSolution> {
    brute_force_oracle_with_limits(problem, ORACLE_MAX_P, ORACLE_MAX_ROWS)
}

/// [`brute_force_oracle`] with caller-chosen size limits.
///
/// The objective is piecewise linear and convex, so when the design has full
/// column rank a minimizer lies where `p` of the hyperplanes
/// `x_i' b = y_i` (data rows) or `b_j = 0` (penalty kinks) intersect.
pub fn brute_force_oracle_with_limits(
    problem: &PinballProblem,
    max_p: usize,
    max_rows: usize,
) -> Result<PinballSolution> {
    problem.validate()?;
    let p = problem.p();
    let rows: Vec<usize> = (0..problem.len()).filter(|&i| problem.weight[i] > 0.0).collect();
    if p > max_p || rows.len() > max_rows {
        return Err(Error::OracleTooLarge { p, rows: rows.len(), max_p, max_rows });
    }
    // hyperplanes as (normal, offset)
    let mut planes: Vec<(Vec<f64>, f64)> =
        rows.iter().map(|&i| (problem.row(i).features.to_vec(), problem.response[i])).collect();
    if let Some(pen) = problem.penalty() {
        for (j, &l) in pen.iter().enumerate() {
            if l > 0.0 {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                planes.push((e, 0.0));
            }
        }
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..p).collect();
    if planes.len() >= p {
        loop {
            if let Some(b) = gauss_solve(&idx.iter().map(|&k| planes[k].clone()).collect::<Vec<_>>()) {
                let obj = problem.objective(&b);
                if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                    best = Some((obj, b));
                }
            }
            // next combination in lexicographic order
            let mut k = p;
            while k > 0 && idx[k - 1] == planes.len() - p + k - 1 {
                k -= 1;
            }
            if k == 0 {
                break;
            }
            idx[k - 1] += 1;
            for t in k..p {
                idx[t] = idx[t - 1] + 1;
            }
        }
    }
    let (objective, coefficients) =
        best.ok_or_else(|| Error::Singular("no nonsingular basis: design is rank deficient".into()))?;
    Ok(PinballSolution { coefficients, objective, status: SolveStatus::Optimal, iterations: 0, duality_gap: 0.0 })
}

/// Gaussian elimination with partial pivoting on a tiny square system.
fn gauss_solve(planes: &[(Vec<f64>, f64)]) -> Option<Vec<f64>> {
    let n = planes.len();
    let mut a: Vec<Vec<f64>> = planes.iter().map(|(v, r)| {
        let mut row = v.clone();
        row.push(*r);
        row
    }).collect();
    let scale = a.iter().flat_map(|r| r[..n].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..=n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}
