use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcplm::efficiency::{r1, r2, tau_cov};
use vcplm::model::{uniform_grid, EvalMode};
use vcplm::simbench::{selection_metrics, SimConfig};
use vcplm::sparse::{lambda_max, log_grid};
use vcplm::{semi_cqr, semi_qr, CurveSet, Dataset, ErrorDist, KernelSpec, QuantileGrid};

const EPA: KernelSpec = KernelSpec::Epanechnikov;

/// `y = sin(2 pi u) + u x + z1 - 0.5 z2 + t3-like noise` with a baseline.
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

fn builtin(k: usize) -> ErrorDist {
    ErrorDist::builtins().swap_remove(k % 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn curves_are_exact_at_their_grid_points(vals in prop::collection::vec(-1e3f64..1e3, 2..30)) {
        let m = vals.len();
        let grid = uniform_grid(-2.0, 5.0, m);
        let slope: Vec<f64> = vals.iter().map(|v| v * 0.5 - 1.0).collect();
        let c = CurveSet::new(grid.clone(), vec![vals.clone()], vec![slope.clone()], EvalMode::OnGrid).unwrap();
        for (k, &g) in grid.iter().enumerate() {
            let v = c.evaluate(g).unwrap();
            prop_assert_eq!(v[0], vals[k]);
            prop_assert_eq!(v[1], slope[k]);
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected(n in 3usize..40, short in 1usize..3, which in 0usize..3) {
        let mut u = vec![0.5; n];
        let mut y = vec![1.0; n];
        let mut zrows = n;
        match which {
            0 => u.truncate(n - short),
            1 => y.truncate(n - short),
            _ => zrows = n - short,
        }
        let r = Dataset::new(u, DMatrix::zeros(n, 0), DMatrix::zeros(zrows, 1), y, true);
        prop_assert!(r.is_err());
    }

    #[test]
    fn level_covariance_is_psd(q in 1usize..=19) {
        let g = QuantileGrid::new(q).unwrap();
        let m = DMatrix::from_fn(q, q, |a, b| tau_cov(a, b, &g));
        prop_assert!(m.clone().symmetric_eigenvalues().min() >= -1e-12);
        prop_assert_eq!(m.clone(), m.transpose());
    }

    #[test]
    fn efficiency_is_location_invariant(k in 0usize..6, c in -5.0f64..5.0, q in 1usize..12) {
        let d = builtin(k);
        let s = d.clone().shifted(c);
        let (a1, b1) = (r1(&d, q).unwrap(), r1(&s, q).unwrap());
        let (a2, b2) = (r2(&d, q).unwrap(), r2(&s, q).unwrap());
        prop_assert!((a1 - b1).abs() <= 1e-8 * a1.abs().max(1.0), "{} vs {}", a1, b1);
        prop_assert!((a2 - b2).abs() <= 1e-8 * a2.abs().max(1.0), "{} vs {}", a2, b2);
    }

    #[test]
    fn efficiency_scales_quadratically(k in 0usize..6, big in any::<bool>(), q in 1usize..12) {
        let s = if big { 2.0 } else { 0.5 };
        let d = builtin(k);
        let a = r2(&d, q).unwrap();
        let b = r2(&d.clone().scaled(s), q).unwrap();
        prop_assert!((b - s * s * a).abs() <= 1e-8 * b.abs(), "{} vs {}", b, s * s * a);
    }

    #[test]
    fn fit_classes_partition_replications(zeros in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..30)) {
        let truth = [3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let results: Vec<Vec<f64>> =
            zeros.iter().map(|z| z.iter().map(|&zero| if zero { 0.0 } else { 1.0 }).collect()).collect();
        let m = selection_metrics(&results, &truth).unwrap();
        prop_assert_eq!(m.under_fit + m.correct_fit + m.over_fit, 1.0);
        prop_assert_eq!(m.under_fit_count + m.correct_fit_count + m.over_fit_count, zeros.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stage_two_ignores_a_common_shift_of_response_and_curves(seed in 0u64..1000, amp in -3.0f64..3.0) {
        let d = dataset(80, seed);
        let g = QuantileGrid::new(3).unwrap();
        let curves = semi_cqr::stage1_curves_cqr(&d, &g, 0.3, EPA).unwrap();
        let base = semi_cqr::stage2_refine_beta_cqr(&d, &curves, &g).unwrap();
        let shift = |u: f64| amp * (3.0 * u).cos();
        let y: Vec<f64> = d.u().iter().zip(d.y()).map(|(&u, y)| y + shift(u)).collect();
        let moved = CurveSet::new(
            curves.grid.clone(),
            curves.alpha0_k.iter().map(|a| a.iter().zip(&curves.grid).map(|(v, &u)| v + shift(u)).collect()).collect(),
            curves.alpha.clone(),
            EvalMode::AtObservations,
        )
        .unwrap();
        let s = semi_cqr::stage2_refine_beta_cqr(&d.with_response(y).unwrap(), &moved, &g).unwrap();
        prop_assert!((s.objective - base.objective).abs() <= 1e-8 * (1.0 + base.objective));
    }

    #[test]
    fn composite_fit_is_location_and_scale_equivariant(seed in 0u64..1000, c in -5.0f64..5.0, s in 0.2f64..5.0) {
        let d = dataset(70, seed);
        let g = QuantileGrid::new(3).unwrap();
        let grid = uniform_grid(0.1, 0.9, 5);
        let base = semi_cqr::fit_semi_cqr(&d, &g, 0.3, 0.3, EPA, &grid).unwrap();
        let shifted = semi_cqr::fit_semi_cqr(&d.with_response(d.y().iter().map(|y| y + c).collect()).unwrap(), &g, 0.3, 0.3, EPA, &grid).unwrap();
        let scaled = semi_cqr::fit_semi_cqr(&d.with_response(d.y().iter().map(|y| s * y).collect()).unwrap(), &g, 0.3, 0.3, EPA, &grid).unwrap();
        let o = base.objectives.stage2;
        prop_assert!((shifted.objectives.stage2 - o).abs() <= 1e-8 * (1.0 + o));
        prop_assert!((scaled.objectives.stage2 - s * o).abs() <= 1e-8 * (1.0 + s * o));
        for ((a, b), t) in base.objectives.stage3.iter().zip(&shifted.objectives.stage3).zip(&scaled.objectives.stage3) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a));
            prop_assert!((s * a - t).abs() <= 1e-8 * (1.0 + t));
        }
    }

    #[test]
    fn selection_zeros_are_exact_and_df_is_monotone(seed in 0u64..1000) {
        let d = dataset(90, seed);
        let g = QuantileGrid::new(3).unwrap();
        let curves = semi_cqr::stage1_curves_cqr(&d, &g, 0.3, EPA).unwrap();
        let pilot = semi_cqr::stage2_refine_beta_cqr(&d, &curves, &g).unwrap().beta;
        let loss = vcplm::SparseLoss::Cqr(g.clone());
        let hi = lambda_max(&d, &curves, &pilot, &loss).unwrap();
        let grid = log_grid(hi, 1e3, 15);
        let sel = vcplm::bic_select(&d, &curves, &pilot, &g, &grid).unwrap();
        for pt in &sel.path {
            let nonzero = pt.beta.iter().filter(|b| **b != 0.0).count();
            prop_assert_eq!(nonzero, pt.df);
        }
        prop_assert_eq!(sel.path[0].df, 0);
        for w in sel.path.windows(2) {
            prop_assert!(w[0].df <= w[1].df, "df must not grow with lambda: {:?}", sel.path.iter().map(|p| p.df).collect::<Vec<_>>());
        }
    }
}

#[test]
fn quantile_levels_on_symmetric_errors_agree_on_average() {
    let reps = 20;
    let mut diffs = Vec::new();
    for rep in 0..reps {
        let d = dataset(200, 100 + rep);
        let grid = uniform_grid(0.1, 0.9, 5);
        let lo = semi_qr::fit_semi_qr(&d, 0.25, 0.2, 0.2, EPA, &grid).unwrap();
        let hi = semi_qr::fit_semi_qr(&d, 0.75, 0.2, 0.2, EPA, &grid).unwrap();
        diffs.push(lo.beta.iter().zip(&hi.beta).map(|(a, b)| a - b).collect::<Vec<f64>>());
    }
    for j in 0..2 {
        let v: Vec<f64> = diffs.iter().map(|d| d[j]).collect();
        let (mean, sd) = vcplm::simbench::mean_sd(&v);
        let se = sd / (reps as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se + 1e-3, "coefficient {j}: mean difference {mean}, se {se}");
    }
}

#[test]
fn simulation_report_ignores_the_thread_count() {
    let cfg = SimConfig { reps: 3, q: 3, qr_levels: vec![0.5], ..SimConfig::default() };
    let one = vcplm::run_monte_carlo(&SimConfig { threads: Some(1), ..cfg.clone() }).unwrap();
    let two = vcplm::run_monte_carlo(&SimConfig { threads: Some(3), ..cfg }).unwrap();
    assert_eq!(one.to_csv(), two.to_csv());
    assert_eq!(one.methods, two.methods);
}
