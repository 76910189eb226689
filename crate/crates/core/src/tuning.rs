//! Method dispatch, prediction and k-fold bandwidth selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::lp::check_loss;
use crate::model::{CurveSet, Dataset, Method, QuantileGrid, SemiFit};
use crate::sparse::SparseLoss;
use crate::{semi_cqr, semi_ls, semi_qr};

/// Three-stage fit for any method.
pub fn fit_method(data: &Dataset, method: Method, h1: f64, h3: f64, kernel: KernelSpec, grid: &[f64]) -> Result<SemiFit> {
    match method {
        Method::Ls => semi_ls::fit_semi_ls(data, h1, h3, kernel, grid),
        Method::Cqr { q } => semi_cqr::fit_semi_cqr(data, &QuantileGrid::new(q)?, h1, h3, kernel, grid),
        Method::Qr { tau } => semi_qr::fit_semi_qr(data, tau, h1, h3, kernel, grid),
    }
}

/// Stage-1 curves at the observations, the stage-2 coefficients and the
/// matching one-step loss: the inputs of a sparse refit.
pub fn pilot_fit(data: &Dataset, method: Method, h1: f64, kernel: KernelSpec) -> Result<(CurveSet, Vec<f64>, SparseLoss)> {
    Ok(match method {
        Method::Ls => {
            let c = semi_ls::stage1_curves_ls(data, h1, kernel)?;
            let b = semi_ls::stage2_refine_beta_ls(data, &c)?.beta;
            (c, b, SparseLoss::Ls)
        }
        Method::Cqr { q } => {
            let g = QuantileGrid::new(q)?;
            let c = semi_cqr::stage1_curves_cqr(data, &g, h1, kernel)?;
            let b = semi_cqr::stage2_refine_beta_cqr(data, &c, &g)?.beta;
            (c, b, SparseLoss::Cqr(g))
        }
        Method::Qr { tau } => {
            let c = semi_qr::stage1_curves_qr(data, tau, h1, kernel)?;
            let b = semi_qr::stage2_refine_beta(data, &c, tau)?.beta;
            (c, b, SparseLoss::Qr(tau))
        }
    })
}

/// Stage-3 curves for a given `beta`.
pub fn refine_curves(
    data: &Dataset,
    method: Method,
    beta: &[f64],
    h3: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<CurveSet> {
    match method {
        Method::Ls => semi_ls::stage3_refine_curves_ls(data, beta, h3, kernel, grid),
        Method::Cqr { q } => semi_cqr::stage3_refine_curves_cqr(data, beta, &QuantileGrid::new(q)?, h3, kernel, grid),
        Method::Qr { tau } => semi_qr::stage3_refine_curves(data, beta, tau, h3, kernel, grid),
    }
}

/// Fitted values `baseline(u) + x' alpha(u) + z' beta` for the rows of
/// `data`. Points outside the curve grid take the nearest endpoint value;
/// the second element counts them.
pub fn predict(curves: &CurveSet, beta: &[f64], data: &Dataset) -> Result<(Vec<f64>, usize)> {
    if data.d1() != curves.d1() || data.d2() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} varying and {} linear coefficients, data has {} and {}",
            curves.d1(),
            beta.len(),
            data.d1(),
            data.d2()
        )));
    }
    let lin = data.linear_part(beta)?;
    let mut clamped = 0;
    let yhat = (0..data.n())
        .map(|i| {
            let (v, c) = curves.evaluate_clamped(data.u()[i]);
            clamped += c as usize;
            v[0] + (0..data.d1()).map(|j| data.x()[(i, j)] * v[1 + j]).sum::<f64>() + lin[i]
        })
        .collect();
    Ok((yhat, clamped))
}

/// Out-of-sample loss of `fit` on `data`: mean check loss summed over the
/// fitted levels for quantile methods, mean squared error for least squares.
pub fn prediction_loss(fit: &SemiFit, data: &Dataset) -> Result<f64> {
    let lin = data.linear_part(&fit.beta)?;
    let taus: Vec<f64> = match fit.method {
        Method::Ls => Vec::new(),
        Method::Qr { tau } => vec![tau],
        Method::Cqr { q } => QuantileGrid::new(q)?.taus().to_vec(),
    };
    let mut total = 0.0;
    for i in 0..data.n() {
        let (v, _) = fit.curves.evaluate_clamped(data.u()[i]);
        let varying: f64 = (0..data.d1()).map(|j| data.x()[(i, j)] * v[1 + j]).sum();
        let r = data.y()[i] - varying - lin[i];
        if taus.is_empty() {
            let r = r - v[0];
            total += r * r;
        } else {
            let a0 = fit.curves.intercepts_clamped(data.u()[i]);
            total += taus.iter().zip(&a0).map(|(&t, a)| check_loss(r - a, t)).sum::<f64>();
        }
    }
    Ok(total / data.n() as f64)
}

/// Median of `|y - yhat|`.
pub fn median_absolute_error(y: &[f64], yhat: &[f64]) -> f64 {
    let dev: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect();
    crate::simbench::median(&dev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldFailure {
    pub h: f64,
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub h: f64,
    /// Mean out-of-fold loss per candidate; `None` when some fold failed.
    pub scores: Vec<Option<f64>>,
    pub failures: Vec<FoldFailure>,
}

fn sorted_points(u: &[f64]) -> Vec<f64> {
    let mut g = u.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Assigns rows to `folds` contiguous blocks of a seeded permutation.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos * folds / n;
    }
    fold
}

/// K-fold cross-validated bandwidth, used for both estimation stages. The
/// held-out curves are estimated directly at the held-out `u` values.
/// Candidates with a failed fold are skipped; scores within `1e-9`
/// relative count as ties, which go to the larger `h`.
pub fn cv_bandwidth(
    data: &Dataset,
    method: Method,
    folds: usize,
    h_grid: &[f64],
    kernel: KernelSpec,
    seed: u64,
) -> Result<CvResult> {
    if h_grid.is_empty() {
        return Err(Error::InvalidConfig("bandwidth grid is empty".into()));
    }
    if let Some(&h) = h_grid.iter().find(|h| !(**h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidBandwidth(h));
    }
    if folds < 2 || folds > data.n() {
        return Err(Error::InvalidConfig(format!("fold count must lie in [2, {}], got {folds}", data.n())));
    }
    let assign = fold_assignment(data.n(), folds, seed);
    let splits = (0..folds)
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| assign[i] != f).collect();
            let test: Vec<usize> = (0..data.n()).filter(|&i| assign[i] == f).collect();
            Ok((data.subset(&train)?, data.subset(&test)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut failures = Vec::new();
    let mut scores = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let mut total = 0.0;
        let mut ok = true;
        for (f, (train, test)) in splits.iter().enumerate() {
            let res = fit_method(train, method, h, h, kernel, &sorted_points(test.u()))
                .and_then(|fit| prediction_loss(&fit, test));
            match res {
                Ok(l) => total += l * test.n() as f64,
                Err(e) => {
                    failures.push(FoldFailure { h, fold: f, message: e.to_string() });
                    ok = false;
                }
            }
        }
        scores.push(ok.then(|| total / data.n() as f64));
    }

    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let sb = scores[b].expect("best has a score");
                let tol = 1e-9 * (1.0 + sb.abs());
                if s < sb - tol || ((s - sb).abs() <= tol && h_grid[i] > h_grid[b]) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let best = best.ok_or_else(|| Error::InvalidConfig("every bandwidth candidate failed in some fold".into()))?;
    Ok(CvResult { h: h_grid[best], scores, failures })
}
