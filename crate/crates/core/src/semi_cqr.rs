//! Three-stage semiparametric composite quantile regression.
//!
//! Every stage minimizes the check loss summed over the levels of a
//! [`QuantileGrid`], with one intercept per level and all other coefficients
//! shared across levels. The reported baseline is the level average of the
//! intercepts.

use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::local::{self, LocalFit, Loss, RefinedBeta};
use crate::model::{CurveSet, Dataset, Method, QuantileGrid, SemiFit};

fn loss(qgrid: &QuantileGrid) -> Loss {
    Loss::Pinball(qgrid.taus().to_vec())
}

/// Local composite fit around `u0` including the linear covariates.
pub fn stage1_local_cqr(
    data: &Dataset,
    u0: f64,
    qgrid: &QuantileGrid,
    h: f64,
    kernel: KernelSpec,
) -> Result<LocalFit> {
    local::local_fit(data, data.y(), u0, &loss(qgrid), h, kernel, true)
}

/// Stage-1 curves at every observation point.
pub fn stage1_curves_cqr(data: &Dataset, qgrid: &QuantileGrid, h: f64, kernel: KernelSpec) -> Result<CurveSet> {
    Ok(local::stage_one(data, &loss(qgrid), h, kernel)?.curves)
}

/// Composite quantile regression of the level-specific partial residuals on `z`.
pub fn stage2_refine_beta_cqr(data: &Dataset, stage1_curves: &CurveSet, qgrid: &QuantileGrid) -> Result<RefinedBeta> {
    local::stage_two(data, stage1_curves, &loss(qgrid))
}

pub fn stage3_refine_curves_cqr(
    data: &Dataset,
    beta: &[f64],
    qgrid: &QuantileGrid,
    h: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<CurveSet> {
    Ok(local::stage_three(data, beta, &loss(qgrid), h, kernel, grid)?.curves)
}

pub fn fit_semi_cqr(
    data: &Dataset,
    qgrid: &QuantileGrid,
    h1: f64,
    h3: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<SemiFit> {
    local::fit_three_stage(data, &loss(qgrid), Method::Cqr { q: qgrid.q() }, h1, h3, kernel, grid)
}

/// Number of stored points where the level intercepts decrease somewhere in `k`.
pub fn intercept_crossings(curves: &CurveSet) -> usize {
    (0..curves.len())
        .filter(|&m| curves.alpha0_k.windows(2).any(|w| w[1][m] < w[0][m]))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::brute_force_oracle_with_limits;
    use crate::model::uniform_grid;
    use crate::semi_qr;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPA: KernelSpec = KernelSpec::Epanechnikov;

    fn data(n: usize, noise: f64, baseline: bool, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n)
            .map(|i| {
                let b = if baseline { (2.0 * u[i]).cos() } else { 0.0 };
                b + (3.0 * u[i]).sin() * x[i] + 1.5 * z[i] + noise * rng.random_range(-1.0..1.0)
            })
            .collect();
        Dataset::new(u, DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 1, z), y, baseline).unwrap()
    }

    #[test]
    fn single_level_is_median_regression() {
        let d = data(60, 0.5, true, 1);
        let g = QuantileGrid::new(1).unwrap();
        for u0 in [0.2, 0.5, 0.8] {
            let a = stage1_local_cqr(&d, u0, &g, 0.3, EPA).unwrap();
            let b = semi_qr::stage1_local_qr(&d, u0, 0.5, 0.3, EPA).unwrap();
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.intercepts, b.intercepts);
        }
    }

    #[test]
    fn constant_response_gives_equal_intercepts() {
        let n = 40;
        let u: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let d = Dataset::new(u, DMatrix::zeros(n, 0), DMatrix::zeros(n, 0), vec![3.0; n], true).unwrap();
        let g = QuantileGrid::new(5).unwrap();
        let f = stage1_local_cqr(&d, 0.5, &g, 0.3, EPA).unwrap();
        assert_eq!(f.intercepts.len(), 5);
        for a in &f.intercepts {
            assert!((a - 3.0).abs() < 1e-9);
        }
        let mean: f64 = f.intercepts.iter().sum::<f64>() / 5.0;
        assert!((mean - 3.0).abs() < 1e-9);
    }

    #[test]
    fn composite_window_matches_enumeration() {
        // n = 12, q = 3, d1 = d2 = 1: 7 columns, 36 rows
        let d = data(12, 1.0, true, 21);
        let g = QuantileGrid::new(3).unwrap();
        let u0 = 0.5;
        let fit = stage1_local_cqr(&d, u0, &g, 5.0, EPA).unwrap();
        let prob = local::local_pinball_problem(&d, d.y(), u0, g.taus(), 5.0, EPA, true).unwrap();
        assert_eq!(prob.p(), g.q() + 1 + 2 + 1);
        let oracle = brute_force_oracle_with_limits(&prob, 7, 36).unwrap();
        assert!(
            (fit.objective - oracle.objective).abs() <= 1e-6 * (1.0 + oracle.objective),
            "{} vs {}",
            fit.objective,
            oracle.objective
        );
    }

    #[test]
    fn q1_fit_reduces_to_median_fit() {
        let d = data(80, 0.7, true, 4);
        let grid = uniform_grid(0.05, 0.95, 15);
        let a = fit_semi_cqr(&d, &QuantileGrid::new(1).unwrap(), 0.25, 0.3, EPA, &grid).unwrap();
        let b = semi_qr::fit_semi_qr(&d, 0.5, 0.25, 0.3, EPA, &grid).unwrap();
        for (x, y) in a.objectives.stage1.iter().zip(&b.objectives.stage1) {
            assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()));
        }
        assert!((a.objectives.stage2 - b.objectives.stage2).abs() <= 1e-8 * (1.0 + b.objectives.stage2));
        for (x, y) in a.objectives.stage3.iter().zip(&b.objectives.stage3) {
            assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn location_and_scale_equivariance() {
        let d = data(70, 0.6, true, 9);
        let g = QuantileGrid::new(3).unwrap();
        let grid = uniform_grid(0.1, 0.9, 9);
        let base = fit_semi_cqr(&d, &g, 0.3, 0.3, EPA, &grid).unwrap();

        let shifted = d.with_response(d.y().iter().map(|y| y + 2.5).collect()).unwrap();
        let s = fit_semi_cqr(&shifted, &g, 0.3, 0.3, EPA, &grid).unwrap();
        assert!((s.objectives.stage2 - base.objectives.stage2).abs() < 1e-8 * (1.0 + base.objectives.stage2));
        for (a, b) in s.objectives.stage3.iter().zip(&base.objectives.stage3) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b));
        }
        if s.diagnostics.degenerate_solves == 0 && base.diagnostics.degenerate_solves == 0 {
            assert!((s.beta[0] - base.beta[0]).abs() < 1e-8);
        }

        let scaled = d.with_response(d.y().iter().map(|y| 3.0 * y).collect()).unwrap();
        let s = fit_semi_cqr(&scaled, &g, 0.3, 0.3, EPA, &grid).unwrap();
        assert!((s.objectives.stage2 - 3.0 * base.objectives.stage2).abs() < 1e-8 * (1.0 + s.objectives.stage2));
        if s.diagnostics.degenerate_solves == 0 && base.diagnostics.degenerate_solves == 0 {
            assert!((s.beta[0] - 3.0 * base.beta[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let n = 150;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n).map(|i| 1.0 - u[i] + 2.0 * u[i] * x[i] - z[i]).collect();
        let d = Dataset::new(u, DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 1, z), y, true).unwrap();
        let grid = uniform_grid(0.1, 0.9, 9);
        let fit = fit_semi_cqr(&d, &QuantileGrid::new(5).unwrap(), 0.25, 0.25, EPA, &grid).unwrap();
        assert!((fit.beta[0] + 1.0).abs() < 1e-8);
        let base = fit.curves.baseline();
        for (m, &u) in grid.iter().enumerate() {
            assert!((base[m] - (1.0 - u)).abs() < 1e-4);
            assert!((fit.curves.alpha[0][m] - 2.0 * u).abs() < 1e-4);
        }
    }

    #[test]
    fn crossing_counter() {
        let c = CurveSet::new(
            vec![0.0, 1.0],
            vec![vec![0.0, 1.0], vec![1.0, 0.5]],
            vec![],
            crate::model::EvalMode::OnGrid,
        )
        .unwrap();
        assert_eq!(intercept_crossings(&c), 1);
    }
}
