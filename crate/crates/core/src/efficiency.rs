//! Error distributions and the composite-quantile efficiency factors.
//!
//! For `tau_k = k/(q+1)`, `c_k = F^{-1}(tau_k)` and
//! `tau_kk' = min(tau_k, tau_k') - tau_k tau_k'`:
//!
//! ```text
//! R1(q) = q^-2 sum_k sum_k' tau_kk' / (f(c_k) f(c_k'))
//! R2(q) = sum_k sum_k' tau_kk' / (sum_k f(c_k))^2
//! ```
//!
//! `R2` is the asymptotic variance factor of the composite estimator of the
//! slopes and linear coefficients, `R1` that of the baseline.

use std::f64::consts::{E, PI};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use statrs::function::erf;

use crate::error::{Error, Result};
use crate::model::QuantileGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistKind {
    Normal,
    Logistic,
    Cauchy,
    StudentT { df: f64 },
    /// `p N(0, sigma1^2) + (1 - p) N(0, sigma2^2)`.
    NormalMixture { p: f64, sigma1: f64, sigma2: f64 },
    /// `exp(N(0,1)) - e^{1/2}`, a log-normal shifted to mean zero.
    CenteredLogNormal,
    /// Point mass at zero; only sampling is meaningful.
    Noiseless,
}

/// An error law `location + scale * E` with `E` drawn from `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDist {
    pub kind: DistKind,
    pub location: f64,
    pub scale: f64,
}

const SQRT_E: f64 = 1.648_721_270_700_128_2;

fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erf::erfc(-t / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

impl ErrorDist {
    pub fn new(kind: DistKind) -> Self {
        Self { kind, location: 0.0, scale: 1.0 }
    }

    pub fn normal() -> Self {
        Self::new(DistKind::Normal)
    }

    pub fn logistic() -> Self {
        Self::new(DistKind::Logistic)
    }

    pub fn cauchy() -> Self {
        Self::new(DistKind::Cauchy)
    }

    pub fn student_t(df: f64) -> Self {
        Self::new(DistKind::StudentT { df })
    }

    /// `0.9 N(0,1) + 0.1 N(0, 10^2)`.
    pub fn contaminated_normal() -> Self {
        Self::new(DistKind::NormalMixture { p: 0.9, sigma1: 1.0, sigma2: 10.0 })
    }

    pub fn centered_lognormal() -> Self {
        Self::new(DistKind::CenteredLogNormal)
    }

    pub fn noiseless() -> Self {
        Self::new(DistKind::Noiseless)
    }

    pub fn shifted(self, c: f64) -> Self {
        Self { location: self.location + c, ..self }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self { location: self.location * s, scale: self.scale * s, ..self }
    }

    /// The six error laws of the simulation studies.
    pub fn builtins() -> Vec<ErrorDist> {
        vec![
            Self::normal(),
            Self::logistic(),
            Self::cauchy(),
            Self::student_t(3.0),
            Self::contaminated_normal(),
            Self::centered_lognormal(),
        ]
    }

    pub const NAMES: &'static str = "normal, logistic, cauchy, t<df> (e.g. t3), mixture, lognormal";

    /// Parses `normal`, `logistic`, `cauchy`, `t3`/`t<df>`, `mixture`, `lognormal`, `noiseless`.
    pub fn from_name(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let dist = match lower.as_str() {
            "normal" | "gaussian" => Self::normal(),
            "logistic" => Self::logistic(),
            "cauchy" => Self::cauchy(),
            "mixture" | "contaminated" => Self::contaminated_normal(),
            "lognormal" | "log-normal" => Self::centered_lognormal(),
            "noiseless" | "none" => Self::noiseless(),
            s if s.starts_with('t') => match s[1..].parse::<f64>() {
                Ok(df) if df > 0.0 => Self::student_t(df),
                _ => return Err(Error::UnknownDistribution { name: name.into(), valid: Self::NAMES.into() }),
            },
            _ => return Err(Error::UnknownDistribution { name: name.into(), valid: Self::NAMES.into() }),
        };
        Ok(dist)
    }

    pub fn name(&self) -> String {
        match self.kind {
            DistKind::Normal => "normal".into(),
            DistKind::Logistic => "logistic".into(),
            DistKind::Cauchy => "cauchy".into(),
            DistKind::StudentT { df } => format!("t{df}"),
            DistKind::NormalMixture { .. } => "mixture".into(),
            DistKind::CenteredLogNormal => "lognormal".into(),
            DistKind::Noiseless => "noiseless".into(),
        }
    }

    fn standard_pdf(&self, t: f64) -> f64 {
        match self.kind {
            DistKind::Normal => std_normal_pdf(t),
            DistKind::Logistic => {
                let e = (-t.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            DistKind::Cauchy => 1.0 / (PI * (1.0 + t * t)),
            DistKind::StudentT { df } => students_t(df).pdf(t),
            DistKind::NormalMixture { p, sigma1, sigma2 } => {
                p * std_normal_pdf(t / sigma1) / sigma1 + (1.0 - p) * std_normal_pdf(t / sigma2) / sigma2
            }
            DistKind::CenteredLogNormal => {
                let v = t + SQRT_E;
                if v <= 0.0 {
                    0.0
                } else {
                    std_normal_pdf(v.ln()) / v
                }
            }
            DistKind::Noiseless => f64::NAN,
        }
    }

    fn standard_cdf(&self, t: f64) -> f64 {
        match self.kind {
            DistKind::Normal => std_normal_cdf(t),
            DistKind::Logistic => {
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }
            DistKind::Cauchy => 0.5 + t.atan() / PI,
            DistKind::StudentT { df } => students_t(df).cdf(t),
            DistKind::NormalMixture { p, sigma1, sigma2 } => {
                p * std_normal_cdf(t / sigma1) + (1.0 - p) * std_normal_cdf(t / sigma2)
            }
            DistKind::CenteredLogNormal => {
                let v = t + SQRT_E;
                if v <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf(v.ln())
                }
            }
            DistKind::Noiseless => {
                if t < 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    fn standard_quantile(&self, p: f64) -> f64 {
        match self.kind {
            DistKind::Normal => std_normal_quantile(p),
            DistKind::Logistic => (p / (1.0 - p)).ln(),
            DistKind::Cauchy => (PI * (p - 0.5)).tan(),
            DistKind::CenteredLogNormal => std_normal_quantile(p).exp() - SQRT_E,
            DistKind::Noiseless => 0.0,
            DistKind::StudentT { .. } | DistKind::NormalMixture { .. } => {
                bracketed_root(|t| self.standard_cdf(t) - p, 1e-12)
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.standard_pdf((x - self.location) / self.scale) / self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.standard_cdf((x - self.location) / self.scale)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.location + self.scale * self.standard_quantile(p)
    }

    pub fn mean(&self) -> Option<f64> {
        let m = match self.kind {
            DistKind::Cauchy => return None,
            DistKind::StudentT { df } if df <= 1.0 => return None,
            _ => 0.0,
        };
        Some(self.location + self.scale * m)
    }

    /// `None` when the variance is infinite or undefined.
    pub fn variance(&self) -> Option<f64> {
        let v = match self.kind {
            DistKind::Normal => 1.0,
            DistKind::Logistic => PI * PI / 3.0,
            DistKind::Cauchy => return None,
            DistKind::StudentT { df } if df > 2.0 => df / (df - 2.0),
            DistKind::StudentT { .. } => return None,
            DistKind::NormalMixture { p, sigma1, sigma2 } => p * sigma1 * sigma1 + (1.0 - p) * sigma2 * sigma2,
            DistKind::CenteredLogNormal => (E - 1.0) * E,
            DistKind::Noiseless => 0.0,
        };
        Some(v * self.scale * self.scale)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = match self.kind {
            DistKind::Normal => StandardNormal.sample(rng),
            DistKind::Logistic => {
                let u: f64 = open_unit(rng);
                (u / (1.0 - u)).ln()
            }
            DistKind::Cauchy => rand_distr::Cauchy::new(0.0, 1.0).expect("valid").sample(rng),
            DistKind::StudentT { df } => rand_distr::StudentT::new(df).expect("df > 0").sample(rng),
            DistKind::NormalMixture { p, sigma1, sigma2 } => {
                let first = rng.random::<f64>() < p;
                let z: f64 = StandardNormal.sample(rng);
                if first {
                    sigma1 * z
                } else {
                    sigma2 * z
                }
            }
            DistKind::CenteredLogNormal => {
                let z: f64 = StandardNormal.sample(rng);
                z.exp() - SQRT_E
            }
            DistKind::Noiseless => 0.0,
        };
        self.location + self.scale * t
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn students_t(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("degrees of freedom must be positive")
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Root of an increasing function by bracket expansion and bisection.
fn bracketed_root(f: impl Fn(f64) -> f64, tol: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) > 0.0 {
        lo *= 2.0;
    }
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol * (1.0 + mid.abs()) {
            return mid;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `tau_kk' = min(tau_k, tau_k') - tau_k tau_k'` for 0-based `k`, `k2`.
pub fn tau_cov(k: usize, k2: usize, grid: &QuantileGrid) -> f64 {
    let (a, b) = (grid.taus()[k], grid.taus()[k2]);
    a.min(b) - a * b
}

fn quantile_densities(dist: &ErrorDist, grid: &QuantileGrid) -> Result<Vec<f64>> {
    grid.taus()
        .iter()
        .map(|&tau| {
            let f = dist.pdf(dist.quantile(tau));
            if f > 0.0 && f.is_finite() {
                Ok(f)
            } else {
                Err(Error::DegenerateDensity { tau })
            }
        })
        .collect()
}

pub fn r1(dist: &ErrorDist, q: usize) -> Result<f64> {
    let grid = QuantileGrid::new(q)?;
    let f = quantile_densities(dist, &grid)?;
    let mut s = 0.0;
    for k in 0..q {
        for k2 in 0..q {
            s += tau_cov(k, k2, &grid) / (f[k] * f[k2]);
        }
    }
    Ok(s / (q * q) as f64)
}

pub fn r2(dist: &ErrorDist, q: usize) -> Result<f64> {
    let grid = QuantileGrid::new(q)?;
    let f = quantile_densities(dist, &grid)?;
    let mut t = 0.0;
    for k in 0..q {
        for k2 in 0..q {
            t += tau_cov(k, k2, &grid);
        }
    }
    let c: f64 = f.iter().sum();
    Ok(t / (c * c))
}

/// Which density power enters the single-quantile bandwidth conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QrBandwidthRule {
    /// `h_LS {tau(1-tau) / f(F^-1(tau))}^{1/5}`.
    #[default]
    Printed,
    /// `h_LS {tau(1-tau) / f(F^-1(tau))^2}^{1/5}`.
    DensitySquared,
}

/// `h_CQR = h_LS R2(q)^{1/5}`.
pub fn bandwidth_cqr(h_ls: f64, dist: &ErrorDist, q: usize) -> Result<f64> {
    if !(h_ls > 0.0) {
        return Err(Error::InvalidBandwidth(h_ls));
    }
    Ok(h_ls * r2(dist, q)?.powf(0.2))
}

pub fn bandwidth_qr(h_ls: f64, dist: &ErrorDist, tau: f64, rule: QrBandwidthRule) -> Result<f64> {
    if !(h_ls > 0.0) {
        return Err(Error::InvalidBandwidth(h_ls));
    }
    let f = dist.pdf(dist.quantile(tau));
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::DegenerateDensity { tau });
    }
    let denom = match rule {
        QrBandwidthRule::Printed => f,
        QrBandwidthRule::DensitySquared => f * f,
    };
    Ok(h_ls * (tau * (1.0 - tau) / denom).powf(0.2))
}

/// Efficiency of the composite estimator against least squares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub dist: String,
    pub q: usize,
    pub r1: f64,
    pub r2: f64,
    /// `Var(e) / R2`; infinite when the error variance is.
    pub are_beta: f64,
    /// `are_beta^{4/5}`.
    pub are_curves: f64,
    /// `Var(e) / R1`, the baseline efficiency.
    pub are_baseline: f64,
    /// `h_CQR / h_LS = R2^{1/5}`.
    pub bandwidth_ratio: f64,
}

pub fn are_report(dist: &ErrorDist, q_list: &[usize]) -> Result<Vec<EfficiencyReport>> {
    let var = dist.variance().unwrap_or(f64::INFINITY);
    q_list
        .iter()
        .map(|&q| {
            let r1 = r1(dist, q)?;
            let r2 = r2(dist, q)?;
            let are_beta = var / r2;
            Ok(EfficiencyReport {
                dist: dist.name(),
                q,
                r1,
                r2,
                are_beta,
                are_curves: are_beta.powf(0.8),
                are_baseline: var / r1,
                bandwidth_ratio: r2.powf(0.2),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};

    #[test]
    fn tau_cov_values() {
        let g1 = QuantileGrid::new(1).unwrap();
        assert_eq!(tau_cov(0, 0, &g1), 0.25);
        let g3 = QuantileGrid::new(3).unwrap();
        assert!((tau_cov(0, 2, &g3) - 0.0625).abs() < 1e-15);
        for k in 0..3 {
            for k2 in 0..3 {
                assert_eq!(tau_cov(k, k2, &g3), tau_cov(k2, k, &g3));
            }
        }
    }

    #[test]
    fn tau_cov_matrix_is_psd() {
        for q in 1..=19 {
            let g = QuantileGrid::new(q).unwrap();
            let m = DMatrix::from_fn(q, q, |i, j| tau_cov(i, j, &g));
            let eig = SymmetricEigen::new(m);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-12, "q = {q}: {min}");
        }
    }

    #[test]
    fn normal_median_efficiency() {
        let r = r2(&ErrorDist::normal(), 1).unwrap();
        assert!((r - PI / 2.0).abs() < 1e-12);
        let rep = are_report(&ErrorDist::normal(), &[1]).unwrap();
        assert!((rep[0].are_beta - 2.0 / PI).abs() < 1e-12);
    }

    #[test]
    fn single_quantile_r1_equals_r2() {
        for d in ErrorDist::builtins() {
            let (a, b) = (r1(&d, 1).unwrap(), r2(&d, 1).unwrap());
            assert!((a - b).abs() <= 1e-12 * a, "{d}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for d in ErrorDist::builtins() {
            for i in 1..40 {
                let p = i as f64 / 40.0;
                let x = d.quantile(p);
                assert!((d.cdf(x) - p).abs() < 1e-10, "{d} p={p}");
                let back = d.quantile(d.cdf(x));
                assert!((back - x).abs() < 1e-8 * (1.0 + x.abs()), "{d} x={x}");
            }
        }
    }

    #[test]
    fn centered_lognormal_has_zero_mean() {
        // integrate x f(x) under x = e^v - e^{1/2} with composite Simpson
        let d = ErrorDist::centered_lognormal();
        let (lo, hi, n) = (-15.0, 15.0, 20_000);
        let h = (hi - lo) / n as f64;
        let g = |v: f64| {
            let x = v.exp() - SQRT_E;
            x * d.pdf(x) * v.exp()
        };
        let mut m = g(lo) + g(hi);
        for i in 1..n {
            m += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        m *= h / 3.0;
        assert!(m.abs() < 1e-10, "{m}");
        assert!((d.cdf(0.0) - std_normal_cdf(0.5)).abs() < 1e-15);
    }

    #[test]
    fn location_invariance() {
        for d in ErrorDist::builtins() {
            let moved = d.shifted(3.7);
            for q in [1, 5, 9] {
                let (a, b) = (r2(&d, q).unwrap(), r2(&moved, q).unwrap());
                assert!((a - b).abs() <= 1e-8 * a, "{d} q={q}");
                let (a, b) = (r1(&d, q).unwrap(), r1(&moved, q).unwrap());
                assert!((a - b).abs() <= 1e-8 * a);
            }
        }
    }

    #[test]
    fn scale_law() {
        for d in ErrorDist::builtins() {
            for s in [0.5, 2.0] {
                for q in [1, 9] {
                    let a = r2(&d, q).unwrap();
                    let b = r2(&d.scaled(s), q).unwrap();
                    assert!((b - s * s * a).abs() <= 1e-10 * b, "{d} s={s} q={q}");
                }
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(ErrorDist::from_name("t3").unwrap(), ErrorDist::student_t(3.0));
        assert_eq!(ErrorDist::from_name("Cauchy").unwrap(), ErrorDist::cauchy());
        let err = ErrorDist::from_name("weibull").unwrap_err();
        assert!(err.to_string().contains("lognormal"));
    }

    #[test]
    fn bandwidth_rules() {
        let n = ErrorDist::normal();
        assert!((bandwidth_qr(1.0, &n, 0.5, QrBandwidthRule::Printed).unwrap()
            - (0.25 / std_normal_pdf(0.0)).powf(0.2))
        .abs()
            < 1e-14);
        assert!((bandwidth_qr(1.0, &n, 0.5, QrBandwidthRule::DensitySquared).unwrap()
            - (0.25 / std_normal_pdf(0.0).powi(2)).powf(0.2))
        .abs()
            < 1e-14);
        let h = bandwidth_cqr(0.128, &n, 9).unwrap();
        assert!((h / 0.128 - r2(&n, 9).unwrap().powf(0.2)).abs() < 1e-14);
        assert!(bandwidth_cqr(0.0, &n, 9).is_err());
    }

    #[test]
    fn cauchy_is_finite() {
        let c = ErrorDist::cauchy();
        for q in [1, 5, 9, 99] {
            assert!(r1(&c, q).unwrap().is_finite());
            assert!(r2(&c, q).unwrap().is_finite());
        }
    }

    #[test]
    fn noiseless_density_is_degenerate() {
        assert!(matches!(r2(&ErrorDist::noiseless(), 3), Err(Error::DegenerateDensity { .. })));
    }
}
