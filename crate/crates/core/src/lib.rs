//! Quantile, composite-quantile and least-squares estimation for
//! varying-coefficient partially linear models
//! `Y = a0(U) + X'a(U) + Z'b + e`, with SCAD-weighted variable selection,
//! efficiency calculations and a Monte Carlo harness.

pub mod efficiency;
pub mod error;
pub mod kernels;
pub mod local;
pub mod lp;
pub mod model;
pub mod semi_cqr;
pub mod semi_ls;
pub mod semi_qr;
pub mod simbench;
pub mod sparse;
pub mod tuning;

pub use efficiency::{are_report, ErrorDist, EfficiencyReport};
pub use error::{Error, Result};
pub use kernels::KernelSpec;
pub use model::{CurveSet, Dataset, Method, QuantileGrid, SemiFit};
pub use semi_cqr::fit_semi_cqr;
pub use semi_ls::fit_semi_ls;
pub use semi_qr::fit_semi_qr;
pub use simbench::{run_monte_carlo, BenchReport, SimConfig};
pub use sparse::{bic_select, bic_select_with, SelectionResult, SparseLoss};
pub use tuning::{cv_bandwidth, fit_method};
