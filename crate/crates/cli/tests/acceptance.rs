//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL|SKIP` line
//! (written straight to stdout so it shows without `--nocapture`) and then
//! asserts. Criterion 10 needs the plasma retinol file named by the
//! `PLASMA_DATA` environment variable and is skipped without it.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use clap::Parser;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcplm::lp::{brute_force_oracle, solve, PinballProblem};
use vcplm::model::uniform_grid;
use vcplm::simbench::SimConfig;
use vcplm::sparse::{lambda_max, log_grid};
use vcplm::{
    are_report, bic_select_with, fit_semi_cqr, fit_semi_qr, run_monte_carlo, semi_cqr, semi_ls, semi_qr, BenchReport,
    Dataset, ErrorDist, KernelSpec, QuantileGrid, SemiFit, SparseLoss,
};
use vcplm_cli::args::Cli;
use vcplm_cli::output::read_csv;

const EPA: KernelSpec = KernelSpec::Epanechnikov;

fn verdict(n: u8, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout().lock(), "criterion {n}: {word} ({detail})");
    assert!(pass, "criterion {n} failed: {detail}");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// `y = sin(2 pi u) + u x + z1 - 0.5 z2 + e`, `e` a cubed uniform, with a baseline.
fn dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.random_range(-1.0..1.0);
            (2.0 * std::f64::consts::PI * u[i]).sin() + u[i] * x[i] + z[i] - 0.5 * z[n + i] + e * e * e
        })
        .collect();
    Dataset::new(u, DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 2, z), y, true).unwrap()
}

/// Like [`dataset`] with six linear covariates, three of them inactive.
fn sparse_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2 = 6;
    let beta = [2.0, 0.0, -1.0, 0.0, 0.0, 1.5];
    let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = DMatrix::from_fn(n, d2, |_, _| rng.random_range(-1.0..1.0));
    let y = (0..n)
        .map(|i| {
            let lin: f64 = (0..d2).map(|j| z[(i, j)] * beta[j]).sum();
            let e: f64 = rng.random_range(-1.0..1.0);
            (2.0 * u[i]).cos() + u[i] * x[i] + lin + e
        })
        .collect();
    Dataset::new(u, DMatrix::from_vec(n, 1, x), z, y, true).unwrap()
}

fn random_problem(rng: &mut ChaCha8Rng) -> PinballProblem {
    let p = rng.random_range(1..=3);
    let rows = rng.random_range(p + 3..=25);
    let mut prob = PinballProblem::new(p);
    let mut buf = vec![0.0; p];
    for i in 0..rows {
        buf[0] = 1.0;
        for v in buf.iter_mut().skip(1) {
            *v = rng.random_range(-2.0..2.0);
        }
        let y = rng.random_range(-3.0..3.0);
        let tau = rng.random_range(0.05..0.95);
        let w = if i >= p + 3 && rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.1..2.0) };
        prob.push_row(&buf, y, tau, w).unwrap();
    }
    if rng.random_bool(0.5) {
        let pen = (0..p).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..5.0) } else { 0.0 }).collect();
        prob.set_penalty(pen).unwrap();
    }
    prob
}

/// Copy of `prob` with every response replaced by `f(features, response)`.
fn remapped(prob: &PinballProblem, f: impl Fn(&[f64], f64) -> f64) -> PinballProblem {
    let mut out = PinballProblem::new(prob.p());
    for r in prob.rows() {
        out.push_row(r.features, f(r.features, r.response), r.tau, r.weight).unwrap();
    }
    if let Some(pen) = prob.penalty() {
        out.set_penalty(pen.to_vec()).unwrap();
    }
    out
}

#[test]
fn criterion_01_lp_matches_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst = 0.0f64;
    let mut misses = 0;
    for _ in 0..500 {
        let prob = random_problem(&mut rng);
        let sol = solve(&prob).unwrap();
        let oracle = brute_force_oracle(&prob).unwrap();
        let rel = (sol.objective - oracle.objective).abs() / oracle.objective.abs().max(1e-12);
        worst = worst.max(rel);
        if !close(sol.objective, oracle.objective, 1e-6) {
            misses += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        1,
        misses == 0 && t < Duration::from_secs(30),
        &format!("500 problems, {misses} mismatches, worst relative gap {worst:.2e}, {:.1}s", t.as_secs_f64()),
    );
}

fn same_objectives(a: &SemiFit, b: &SemiFit, tol: f64) -> bool {
    let o = (&a.objectives, &b.objectives);
    o.0.stage1.len() == o.1.stage1.len()
        && o.0.stage3.len() == o.1.stage3.len()
        && o.0.stage1.iter().zip(&o.1.stage1).all(|(x, y)| close(*x, *y, tol))
        && close(o.0.stage2, o.1.stage2, tol)
        && o.0.stage3.iter().zip(&o.1.stage3).all(|(x, y)| close(*x, *y, tol))
}

#[test]
fn criterion_02_one_level_composite_is_median_regression() {
    let start = Instant::now();
    let g1 = QuantileGrid::new(1).unwrap();
    let grid = uniform_grid(0.05, 0.95, 10);
    let mut bad = 0;
    for seed in 0..20 {
        let d = dataset(100, 9000 + seed);
        let c = fit_semi_cqr(&d, &g1, 0.25, 0.25, EPA, &grid).unwrap();
        let m = fit_semi_qr(&d, 0.5, 0.25, 0.25, EPA, &grid).unwrap();
        if !same_objectives(&c, &m, 1e-8) {
            bad += 1;
        }
    }
    let t = start.elapsed();
    verdict(
        2,
        bad == 0 && t < Duration::from_secs(60),
        &format!("20 datasets, {bad} with differing stage objectives, {:.1}s", t.as_secs_f64()),
    );
}

#[test]
fn criterion_03_efficiency_constants() {
    let normal = are_report(&ErrorDist::normal(), &[1, 99]).unwrap();
    let two_over_pi = 2.0 / std::f64::consts::PI;
    let mut ok = (normal[0].are_beta - two_over_pi).abs() <= 1e-3 && (normal[1].are_beta - 0.955).abs() <= 0.005;
    let mut detail = format!("normal q=1 {:.5}, q=99 {:.5}", normal[0].are_beta, normal[1].are_beta);
    // 1/R2 with each error law rescaled to unit variance, i.e. Var(e)/R2
    for d in ErrorDist::builtins() {
        let r = &are_report(&d, &[99]).unwrap()[0];
        ok &= r.are_beta >= 0.85;
        detail.push_str(&format!("; {} {:.4}", r.dist, r.are_beta));
    }
    verdict(3, ok, &detail);
}

type Cached = (&'static BenchReport, Duration);

/// Example 1 at the default settings (n = 200, h = 0.128, 100 replications),
/// run once per error law and shared by criteria 4 to 6, with its run time.
fn example1(dist: &str) -> Cached {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(String, Cached)>>> = OnceLock::new();
    let mut c = CACHE.get_or_init(Default::default).lock().unwrap();
    if let Some((_, r)) = c.iter().find(|(d, _)| d == dist) {
        return *r;
    }
    let qr_levels = if dist == "normal" { vec![0.5] } else { vec![] };
    let cfg = SimConfig { example: 1, dist: dist.into(), qr_levels, ..SimConfig::default() };
    let start = Instant::now();
    let r: &'static BenchReport = Box::leak(Box::new(run_monte_carlo(&cfg).unwrap()));
    c.push((dist.to_string(), (r, start.elapsed())));
    (r, start.elapsed())
}

#[test]
fn criterion_04_example1_normal_bias_and_spread() {
    let (r, t) = example1("normal");
    let mut ok = t < Duration::from_secs(600);
    let mut detail = String::new();
    for label in ["LS", "CQR9", "QR0.50"] {
        let m = r.method(label).unwrap();
        let worst = m.bias.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        ok &= worst <= 0.03 && m.failures == 0;
        detail.push_str(&format!("{label} max|bias| {worst:.4}; "));
    }
    let sd_ls = r.method("LS").unwrap().sd[0];
    let sd_cqr = r.method("CQR9").unwrap().sd[0];
    ok &= (0.10..=0.14).contains(&sd_ls) && (0.10..=0.15).contains(&sd_cqr);
    detail.push_str(&format!("SD beta1 LS {sd_ls:.4}, CQR9 {sd_cqr:.4}; {:.0}s", t.as_secs_f64()));
    verdict(4, ok, &detail);
}

#[test]
fn criterion_05_example1_relative_efficiency() {
    let rmse = |dist: &str| example1(dist).0.method("CQR9").unwrap().rmse.clone();
    let normal = rmse("normal")[0];
    let t3 = rmse("t3")[0];
    let mixture = rmse("mixture")[0];
    let cauchy = rmse("cauchy");
    let ok = (0.80..=1.05).contains(&normal) && t3 >= 1.2 && mixture >= 3.0 && cauchy.iter().all(|v| *v > 100.0);
    verdict(
        5,
        ok,
        &format!("beta1 RMSE normal {normal:.3}, t3 {t3:.3}, mixture {mixture:.3}; cauchy {cauchy:.1?}"),
    );
}

#[test]
fn criterion_06_example1_curve_efficiency() {
    let rase = |dist: &str| example1(dist).0.method("CQR9").unwrap().rase_mean.unwrap();
    let (normal, mixture) = (rase("normal"), rase("mixture"));
    verdict(
        6,
        (0.85..=1.05).contains(&normal) && mixture >= 2.0,
        &format!("mean RASE normal {normal:.3}, mixture {mixture:.3}"),
    );
}

#[test]
fn criterion_07_example2_selection() {
    let run = |dist: &str| {
        let cfg = SimConfig { example: 2, dist: dist.into(), qr_levels: vec![], ..SimConfig::default() };
        run_monte_carlo(&cfg).unwrap()
    };
    let normal = run("normal");
    let sel = |r: &BenchReport, label: &str| r.method(label).unwrap().selection.clone().unwrap();
    let (cqr, ls) = (sel(&normal, "CQR9"), sel(&normal, "LS"));
    let cauchy = sel(&run("cauchy"), "CQR9");
    let (mc, ml) = (&cqr.metrics, &ls.metrics);
    let ok = mc.correct_zeros >= 4.9
        && mc.incorrect_zeros == 0.0
        && mc.correct_fit >= 0.9
        && ml.over_fit >= 0.05
        && ml.correct_fit < mc.correct_fit
        && cauchy.rgmse_median <= 0.05;
    verdict(
        7,
        ok,
        &format!(
            "CQR C {:.2} IC {:.2} C-fit {:.2}; LS O-fit {:.2} C-fit {:.2}; cauchy CQR median RGMSE {:.4}",
            mc.correct_zeros, mc.incorrect_zeros, mc.correct_fit, ml.over_fit, ml.correct_fit, cauchy.rgmse_median
        ),
    );
}

#[test]
fn criterion_08_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let g = QuantileGrid::new(5).unwrap();
    let grid = uniform_grid(0.1, 0.9, 6);
    let mut bad = Vec::new();
    for case in 0..50 {
        let c = rng.random_range(-5.0..5.0);
        let s = rng.random_range(0.2..5.0);

        // location moves need an unpenalized intercept, as in the estimators
        let mut prob = random_problem(&mut rng);
        if let Some(mut pen) = prob.penalty().map(<[f64]>::to_vec) {
            pen[0] = 0.0;
            prob.set_penalty(pen).unwrap();
        }
        let free: Vec<bool> = (0..prob.p()).map(|j| prob.penalty().is_none_or(|p| p[j] == 0.0)).collect();
        let base = solve(&prob).unwrap().objective;
        let shifted = solve(&remapped(&prob, |_, y| y + c)).unwrap().objective;
        let scaled = solve(&remapped(&prob, |_, y| s * y)).unwrap().objective;
        // adding a linear function of the free features moves the minimizer, not the objective
        let tilt = |x: &[f64], y: f64| y + c * x.iter().zip(&free).filter(|(_, f)| **f).map(|(v, _)| v).sum::<f64>();
        let tilted = solve(&remapped(&prob, tilt)).unwrap().objective;
        if !(close(shifted, base, 1e-8) && close(scaled, s * base, 1e-8) && close(tilted, base, 1e-8)) {
            bad.push(format!("lp {case}"));
        }

        let d = dataset(60, 8000 + case);
        let moved = |f: &dyn Fn(f64) -> f64| d.with_response(d.y().iter().map(|y| f(*y)).collect()).unwrap();
        let (dc, ds) = (moved(&|y| y + c), moved(&|y| s * y));
        let fits: [(&str, &dyn Fn(&Dataset) -> SemiFit); 2] = [
            ("qr", &|d| fit_semi_qr(d, 0.3, 0.3, 0.3, EPA, &grid).unwrap()),
            ("cqr", &|d| fit_semi_cqr(d, &g, 0.3, 0.3, EPA, &grid).unwrap()),
        ];
        for (name, fit) in fits {
            let (a, b, t) = (fit(&d).objectives, fit(&dc).objectives, fit(&ds).objectives);
            let ok = close(b.stage2, a.stage2, 1e-8)
                && close(t.stage2, s * a.stage2, 1e-8)
                && a.stage1.iter().zip(&b.stage1).all(|(x, y)| close(*x, *y, 1e-8))
                && a.stage1.iter().zip(&t.stage1).all(|(x, y)| close(s * x, *y, 1e-8))
                && a.stage3.iter().zip(&b.stage3).all(|(x, y)| close(*x, *y, 1e-8))
                && a.stage3.iter().zip(&t.stage3).all(|(x, y)| close(s * x, *y, 1e-8));
            if !ok {
                bad.push(format!("{name} {case}"));
            }
        }
    }
    verdict(8, bad.is_empty(), &format!("50 instances x (lp, qr, cqr), failures {bad:?}"));
}

#[test]
fn criterion_09_exact_zeros_and_monotone_df() {
    let g = QuantileGrid::new(9).unwrap();
    let (mut points, mut zeros, mut bad_zeros, mut bad_df) = (0, 0, 0, 0);
    for seed in 0..20 {
        let d = sparse_dataset(150, 7000 + seed);
        for loss in [SparseLoss::Cqr(g.clone()), SparseLoss::Qr(0.5), SparseLoss::Ls] {
            let (curves, pilot) = match &loss {
                SparseLoss::Cqr(g) => {
                    let c = semi_cqr::stage1_curves_cqr(&d, g, 0.2, EPA).unwrap();
                    let b = semi_cqr::stage2_refine_beta_cqr(&d, &c, g).unwrap().beta;
                    (c, b)
                }
                SparseLoss::Qr(t) => {
                    let c = semi_qr::stage1_curves_qr(&d, *t, 0.2, EPA).unwrap();
                    let b = semi_qr::stage2_refine_beta(&d, &c, *t).unwrap().beta;
                    (c, b)
                }
                SparseLoss::Ls => {
                    let c = semi_ls::stage1_curves_ls(&d, 0.2, EPA).unwrap();
                    let b = semi_ls::stage2_refine_beta_ls(&d, &c).unwrap().beta;
                    (c, b)
                }
            };
            let hi = lambda_max(&d, &curves, &pilot, &loss).unwrap();
            let sel = bic_select_with(&d, &curves, &pilot, loss, &log_grid(hi, 1e3, 25)).unwrap();
            let mut path: Vec<_> = sel.path.iter().collect();
            path.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
            for w in path.windows(2) {
                if w[1].df > w[0].df {
                    bad_df += 1;
                }
            }
            for pt in path.iter().map(|p| &p.beta).chain([&sel.beta]) {
                points += 1;
                for b in pt {
                    // anything that reads as zero must be a positive zero
                    if b.abs() <= 1e-9 {
                        zeros += 1;
                        if b.to_bits() != 0 {
                            bad_zeros += 1;
                        }
                    }
                }
            }
            let nonzero = sel.beta.iter().filter(|b| **b != 0.0).count();
            if nonzero != sel.df || sel.selected.len() != sel.df {
                bad_df += 1;
            }
        }
    }
    verdict(
        9,
        bad_zeros == 0 && bad_df == 0 && zeros > 0,
        &format!("{points} fits, {zeros} zeros, {bad_zeros} inexact, {bad_df} df violations"),
    );
}

fn plasma_run(data: &Path, out: &Path, method: &str) -> (f64, Vec<String>) {
    let out_s = out.to_str().unwrap();
    let cli = Cli::try_parse_from([
        "vcplm",
        "select",
        "--data",
        data.to_str().unwrap(),
        "--format",
        "plasma",
        "--roles",
        "u=betadiet, y=betaplasma, z=rest",
        "--exclude",
        "sex,retdiet,retplasma",
        "--categorical",
        "smokstat:current,vituse:no",
        "--standardize",
        "--train-rows",
        "200",
        "--method",
        method,
        "--q",
        "7",
        "--out",
        out_s,
    ])
    .unwrap();
    vcplm_cli::commands::run(cli).unwrap();
    let (_, rows) = read_csv(&out.join("report.csv")).unwrap();
    let get = |k: &str| rows.iter().find(|r| r[0] == k).map(|r| r[1].clone()).unwrap();
    let selected = get("selected").split(';').filter(|s| !s.is_empty()).map(str::to_string).collect();
    (get("test_mape").parse().unwrap(), selected)
}

#[test]
fn criterion_10_plasma_prediction_and_support() {
    let Some(path) = std::env::var_os("PLASMA_DATA") else {
        let _ = writeln!(std::io::stdout().lock(), "criterion 10: SKIP (PLASMA_DATA not set)");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let (cqr, support) = plasma_run(Path::new(&path), &dir.path().join("cqr"), "cqr");
    let (ls, _) = plasma_run(Path::new(&path), &dir.path().join("ls"), "ls");
    let core = ["fiber", "vituse=fairly_often"];
    let extra = support.iter().filter(|s| !core.contains(&s.as_str())).count();
    verdict(
        10,
        cqr <= 0.6 * ls && extra <= 1,
        &format!("test MAPE CQR {cqr:.2}, LS {ls:.2}; CQR support {support:?}"),
    );
}
