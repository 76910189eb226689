//! Compactly supported smoothing kernels and local weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in second-order kernels, all supported on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `0.75 (1 - t^2)` on `|t| < 1`.
    #[default]
    Epanechnikov,
    /// `0.5` on `|t| < 1`.
    Uniform,
    /// `1 - |t|` on `|t| < 1`.
    Triangular,
}

impl KernelSpec {
    pub fn support(&self) -> f64 {
        1.0
    }

    pub fn weight(&self, t: f64) -> f64 {
        kernel_weight(*self, t)
    }
}

/// `K(t)`; exactly zero for `|t| >= 1`.
pub fn kernel_weight(spec: KernelSpec, t: f64) -> f64 {
    let a = t.abs();
    if a >= spec.support() {
        return 0.0;
    }
    match spec {
        KernelSpec::Epanechnikov => 0.75 * (1.0 - t * t),
        KernelSpec::Uniform => 0.5,
        KernelSpec::Triangular => 1.0 - a,
    }
}

/// `w_i = K((u_i - u0) / h) / h`.
pub fn local_weights(spec: KernelSpec, u: &[f64], u0: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidBandwidth(h));
    }
    Ok(u.iter().map(|&ui| kernel_weight(spec, (ui - u0) / h) / h).collect())
}

/// Like [`local_weights`], additionally requiring at least `required`
/// observations with nonzero weight.
pub fn checked_local_weights(
    spec: KernelSpec,
    u: &[f64],
    u0: f64,
    h: f64,
    required: usize,
) -> Result<Vec<f64>> {
    let w = local_weights(spec, u, u0, h)?;
    let available = w.iter().filter(|&&v| v > 0.0).count();
    if available < required {
        return Err(Error::InsufficientLocalData { point: u0, available, required });
    }
    Ok(w)
}

/// Minimum number of in-window observations for a local linear fit with
/// `d1` varying coefficients and `d2` linear covariates.
pub fn min_local_observations(d1: usize, d2: usize) -> usize {
    (1 + d1) * 2 + d2
}

/// `(mu_2, nu_0)`: second moment of `K` and integral of `K^2`.
pub fn kernel_moments(spec: KernelSpec) -> (f64, f64) {
    match spec {
        KernelSpec::Epanechnikov => (0.2, 0.6),
        KernelSpec::Uniform => (1.0 / 3.0, 0.5),
        KernelSpec::Triangular => (1.0 / 6.0, 2.0 / 3.0),
    }
}
