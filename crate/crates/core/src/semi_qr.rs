//! Three-stage semiparametric quantile regression at a single level.

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::local::{self, LocalFit, Loss, RefinedBeta};
use crate::model::{CurveSet, Dataset, Method, SemiFit};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("quantile level must lie in (0, 1), got {tau}")))
    }
}

/// Local linear quantile fit around `u0` including the linear covariates.
pub fn stage1_local_qr(data: &Dataset, u0: f64, tau: f64, h: f64, kernel: KernelSpec) -> Result<LocalFit> {
    check_tau(tau)?;
    local::local_fit(data, data.y(), u0, &Loss::Pinball(vec![tau]), h, kernel, true)
}

/// Stage-1 curves at every observation point.
pub fn stage1_curves_qr(data: &Dataset, tau: f64, h: f64, kernel: KernelSpec) -> Result<CurveSet> {
    check_tau(tau)?;
    Ok(local::stage_one(data, &Loss::Pinball(vec![tau]), h, kernel)?.curves)
}

/// Global quantile regression of the partial residuals on `z`.
pub fn stage2_refine_beta(data: &Dataset, stage1_curves: &CurveSet, tau: f64) -> Result<RefinedBeta> {
    check_tau(tau)?;
    local::stage_two(data, stage1_curves, &Loss::Pinball(vec![tau]))
}

/// Local linear quantile fits of `y - z' beta` on `grid`.
pub fn stage3_refine_curves(
    data: &Dataset,
    beta: &[f64],
    tau: f64,
    h: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<CurveSet> {
    check_tau(tau)?;
    Ok(local::stage_three(data, beta, &Loss::Pinball(vec![tau]), h, kernel, grid)?.curves)
}

pub fn fit_semi_qr(
    data: &Dataset,
    tau: f64,
    h1: f64,
    h3: f64,
    kernel: KernelSpec,
    grid: &[f64],
) -> Result<SemiFit> {
    check_tau(tau)?;
    local::fit_three_stage(data, &Loss::Pinball(vec![tau]), Method::Qr { tau }, h1, h3, kernel, grid)
}
