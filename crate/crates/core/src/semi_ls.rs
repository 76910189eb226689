//! Least-squares three-stage estimator used as the comparison baseline.
//!
//! Stage 1 is kernel-weighted least squares on the local design with a single
//! intercept, stage 2 ordinary least squares of the partial residuals on `z`,
//! stage 3 local linear weighted least squares of `y - z' beta`. All solves go
//! through a QR factorization of the (weighted) design.

use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::local::{self, LocalFit, Loss, RefinedBeta};
use crate::model::{CurveSet, Dataset, Method, SemiFit};

pub fn stage1_local_ls(data: &Dataset, u0: f64, h: f64, kernel: KernelSpec) -> Result<LocalFit> {
    local::local_fit(data, data.y(), u0, &Loss::Squared, h, kernel, true)
}

pub fn stage1_curves_ls(data: &Dataset, h: f64, kernel: KernelSpec) -> Result<CurveSet> {
    Ok(local::stage_one(data, &Loss::Squared, h, kernel)?.curves)
}

pub fn stage2_refine_beta_ls(data: &Dataset, stage1_curves: &CurveSet) -> Result<RefinedBeta> {
    local::stage_two(data, stage1_curves, &Loss::Squared)
}

pub fn stage3_refine_curves_ls(
    data: &Dataset,
    beta: &[f64],
    h: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<CurveSet> {
    Ok(local::stage_three(data, beta, &Loss::Squared, h, kernel, grid)?.curves)
}

pub fn fit_semi_ls(data: &Dataset, h1: f64, h3: f64, kernel: KernelSpec, grid: &[f64]) -> Result<SemiFit> {
    local::fit_three_stage(data, &Loss::Squared, Method::Ls, h1, h3, kernel, grid)
}
