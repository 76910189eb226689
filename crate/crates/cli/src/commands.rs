//! Subcommand implementations. Each returns a short summary for stdout and
//! writes its result files into the output directory.

use std::fmt::Write as _;
use std::path::PathBuf;

use vcplm::model::uniform_grid;
use vcplm::simbench::{run_monte_carlo, with_threads, SimConfig};
use vcplm::sparse::{lambda_max, log_grid, SelectionResult};
use vcplm::tuning::{self, CvResult};
use vcplm::{are_report, bic_select_with, cv_bandwidth, CurveSet, Dataset, ErrorDist, KernelSpec, Method};

use crate::args::{read_toml, Cli, Command, EfficiencyArgs, ModelArgs, SimulateArgs};
use crate::data::{build_design, read_plasma, read_table, Categorical, Design, DesignOptions};
use crate::error::{CliError, CliResult};
use crate::output::OutDir;

/// Default bandwidth candidates as fractions of the range of `u`.
pub const H_GRID_FRACTIONS: [f64; 8] = [0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_OUT: &str = "vcplm-out";

pub fn run(cli: Cli) -> CliResult<String> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(CliError::Input("thread count must be positive".into()));
    }
    match cli.command {
        Command::Fit(a) => with_threads(threads, || cmd_fit(&a))?,
        Command::Select(a) => with_threads(threads, || cmd_select(&a))?,
        Command::Simulate(a) => cmd_simulate(&a, threads),
        Command::Efficiency(a) => cmd_efficiency(&a),
    }
}

/// `fit`/`select` settings after merging flags, config file and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub format: String,
    pub roles: String,
    pub categorical: Vec<String>,
    pub exclude: Vec<String>,
    pub standardize: bool,
    pub baseline: bool,
    pub method: Method,
    pub kernel: KernelSpec,
    pub h: Option<f64>,
    pub h_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub seed: u64,
    pub train_rows: Option<usize>,
    pub grid_points: usize,
    pub lambdas: Option<Vec<f64>>,
    pub lambda_points: usize,
    pub lambda_ratio: f64,
    pub out: PathBuf,
}

fn parse_method(name: &str, q: usize, tau: f64) -> CliResult<Method> {
    let m = match name.trim().to_ascii_lowercase().as_str() {
        "ls" => Method::Ls,
        "qr" => Method::Qr { tau },
        "cqr" => Method::Cqr { q },
        other => return Err(CliError::Input(format!("unknown method '{other}' (valid: ls, qr, cqr)"))),
    };
    if q == 0 {
        return Err(CliError::Input("q must be at least 1".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CliError::Input(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(m)
}

fn parse_kernel(name: &str) -> CliResult<KernelSpec> {
    match name.trim().to_ascii_lowercase().as_str() {
        "epanechnikov" => Ok(KernelSpec::Epanechnikov),
        "uniform" => Ok(KernelSpec::Uniform),
        "triangular" => Ok(KernelSpec::Triangular),
        other => Err(CliError::Input(format!("unknown kernel '{other}' (valid: epanechnikov, uniform, triangular)"))),
    }
}

impl Resolved {
    pub fn from_args(args: &ModelArgs) -> CliResult<Self> {
        let a = args.merged()?;
        let data = a.data.ok_or_else(|| CliError::Input("--data is required".into()))?;
        let roles = a.roles.ok_or_else(|| CliError::Input("--roles is required".into()))?;
        let format = a.format.unwrap_or_else(|| "csv".into()).to_ascii_lowercase();
        if format != "csv" && format != "plasma" {
            return Err(CliError::Input(format!("unknown format '{format}' (valid: csv, plasma)")));
        }
        let r = Resolved {
            config: a.config,
            data,
            format,
            roles,
            categorical: a.categorical.unwrap_or_default(),
            exclude: a.exclude.unwrap_or_default(),
            standardize: a.standardize.unwrap_or(false),
            baseline: a.baseline.unwrap_or(true),
            method: parse_method(a.method.as_deref().unwrap_or("cqr"), a.q.unwrap_or(9), a.tau.unwrap_or(0.5))?,
            kernel: parse_kernel(a.kernel.as_deref().unwrap_or("epanechnikov"))?,
            h: a.h,
            h_grid: a.h_grid,
            folds: a.folds.unwrap_or(5),
            seed: a.seed.unwrap_or(1),
            train_rows: a.train_rows,
            grid_points: a.grid_points.unwrap_or(vcplm::model::DEFAULT_GRID_POINTS),
            lambdas: a.lambdas,
            lambda_points: a.lambda_points.unwrap_or(vcplm::sparse::DEFAULT_LAMBDA_POINTS),
            lambda_ratio: a.lambda_ratio.unwrap_or(1e3),
            out: a.out.unwrap_or_else(|| DEFAULT_OUT.into()),
        };
        if let Some(h) = r.h.filter(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(CliError::Input(format!("bandwidth must be positive and finite, got {h}")));
        }
        if r.grid_points < 2 {
            return Err(CliError::Input("grid points must be at least 2".into()));
        }
        if r.lambda_points == 0 || !(r.lambda_ratio >= 1.0) {
            return Err(CliError::Input("lambda grid needs points >= 1 and ratio >= 1".into()));
        }
        if let Some(l) = r.lambdas.iter().flatten().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(CliError::Input(format!("lambda values must be nonnegative and finite, got {l}")));
        }
        Ok(r)
    }

    /// Every effective setting, for the run metadata.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let list = |v: &[String]| v.join(",");
        let nums = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let (method, q, tau) = match self.method {
            Method::Ls => ("ls", None, None),
            Method::Qr { tau } => ("qr", None, Some(tau)),
            Method::Cqr { q } => ("cqr", Some(q), None),
        };
        let mut m = vec![
            ("config", self.config.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("data", self.data.display().to_string()),
            ("format", self.format.clone()),
            ("roles", self.roles.clone()),
            ("categorical", list(&self.categorical)),
            ("exclude", list(&self.exclude)),
            ("standardize", self.standardize.to_string()),
            ("baseline", self.baseline.to_string()),
            ("method", method.into()),
        ];
        if let Some(q) = q {
            m.push(("q", q.to_string()));
        }
        if let Some(t) = tau {
            m.push(("tau", t.to_string()));
        }
        m.extend([
            ("kernel", format!("{:?}", self.kernel).to_ascii_lowercase()),
            ("h", self.h.map_or("cv".into(), |h| h.to_string())),
            ("h_grid", self.h_grid.as_deref().map_or("default".into(), nums)),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("train_rows", self.train_rows.map_or("all".into(), |n| n.to_string())),
            ("grid_points", self.grid_points.to_string()),
            ("lambdas", self.lambdas.as_deref().map_or("default".into(), nums)),
            ("lambda_points", self.lambda_points.to_string()),
            ("lambda_ratio", self.lambda_ratio.to_string()),
            ("out", self.out.display().to_string()),
        ]);
        m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Data, bandwidth and output grid shared by `fit` and `select`.
pub struct Prepared {
    pub settings: Resolved,
    pub design: Design,
    pub h: f64,
    pub cv: Option<CvResult>,
    pub h_grid: Vec<f64>,
    pub grid: Vec<f64>,
}

pub fn prepare(args: &ModelArgs) -> CliResult<Prepared> {
    let r = Resolved::from_args(args)?;
    let table = match r.format.as_str() {
        "plasma" => read_plasma(&r.data)?,
        _ => read_table(&r.data)?,
    };
    let opts = DesignOptions {
        roles: r.roles.parse()?,
        categorical: r.categorical.iter().map(|c| c.parse()).collect::<CliResult<Vec<Categorical>>>()?,
        exclude: r.exclude.clone(),
        standardize: r.standardize,
        include_baseline: r.baseline,
        train_rows: r.train_rows,
    };
    let design = build_design(&table, &opts)?;
    let (lo, hi) = design.train.u_range();
    if !(hi > lo) {
        return Err(CliError::Input("the index variable is constant over the training rows".into()));
    }
    let h_grid = r.h_grid.clone().unwrap_or_else(|| H_GRID_FRACTIONS.iter().map(|f| f * (hi - lo)).collect());
    let (h, cv) = match r.h {
        Some(h) => (h, None),
        None => {
            let cv = cv_bandwidth(&design.train, r.method, r.folds, &h_grid, r.kernel, r.seed)?;
            (cv.h, Some(cv))
        }
    };
    let grid = uniform_grid(lo, hi, r.grid_points);
    Ok(Prepared { settings: r, design, h, cv, h_grid, grid })
}

/// Test-set predictions: curves re-estimated at the held-out index values,
/// clamped into the training range.
pub struct TestPrediction {
    pub yhat: Vec<f64>,
    pub mape: f64,
    /// Test rows whose index value lies outside the training range.
    pub clamped: usize,
}

fn predict_test(p: &Prepared, beta: &[f64]) -> CliResult<Option<TestPrediction>> {
    let Some(test) = &p.design.test else { return Ok(None) };
    let (lo, hi) = p.design.train.u_range();
    let clamped = test.u().iter().filter(|&&u| u < lo || u > hi).count();
    let mut points: Vec<f64> = test.u().iter().map(|u| u.clamp(lo, hi)).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let r = &p.settings;
    let curves = tuning::refine_curves(&p.design.train, r.method, beta, p.h, r.kernel, &points)?;
    let (yhat, _) = tuning::predict(&curves, beta, test)?;
    let mape = tuning::median_absolute_error(test.y(), &yhat);
    Ok(Some(TestPrediction { yhat, mape, clamped }))
}

fn common_report(p: &Prepared) -> Vec<(String, String)> {
    let d: &Dataset = &p.design.train;
    vec![
        ("method".into(), p.settings.method.label()),
        ("n_train".into(), d.n().to_string()),
        ("n_test".into(), p.design.test.as_ref().map_or(0, Dataset::n).to_string()),
        ("varying_covariates".into(), d.d1().to_string()),
        ("linear_covariates".into(), d.d2().to_string()),
        ("bandwidth".into(), p.h.to_string()),
        ("bandwidth_from_cv".into(), p.cv.is_some().to_string()),
    ]
}

fn push_prediction(report: &mut Vec<(String, String)>, pred: &Option<TestPrediction>) {
    if let Some(t) = pred {
        report.push(("test_mape".into(), t.mape.to_string()));
        report.push(("test_clamped_points".into(), t.clamped.to_string()));
    }
}

fn write_common(out: &OutDir, p: &Prepared, curves: &CurveSet, pred: &Option<TestPrediction>) -> CliResult<()> {
    out.write_curves(curves)?;
    if let Some(cv) = &p.cv {
        let rows: Vec<Vec<String>> = p
            .h_grid
            .iter()
            .zip(&cv.scores)
            .map(|(h, s)| vec![h.to_string(), s.map_or("failed".into(), |v| v.to_string())])
            .collect();
        out.write_csv("cv.csv", &["h".into(), "loss".into()], &rows)?;
    }
    if let (Some(t), Some(test)) = (pred, &p.design.test) {
        let rows: Vec<Vec<String>> = test
            .u()
            .iter()
            .zip(test.y())
            .zip(&t.yhat)
            .map(|((u, y), f)| vec![u.to_string(), y.to_string(), f.to_string()])
            .collect();
        out.write_csv("predictions.csv", &["u".into(), "y".into(), "prediction".into()], &rows)?;
    }
    if !p.design.scales.is_empty() {
        let rows: Vec<Vec<String>> =
            p.design.scales.iter().map(|s| vec![s.name.clone(), s.mean.to_string(), s.sd.to_string()]).collect();
        out.write_csv("scales.csv", &["name".into(), "mean".into(), "sd".into()], &rows)?;
    }
    let mut meta = p.settings.metadata();
    meta.push(("bandwidth".into(), p.h.to_string()));
    meta.push((
        "h_grid_values".into(),
        p.h_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    ));
    out.write_metadata(&meta)?;
    Ok(())
}

fn summary(out: &OutDir, report: &[(String, String)]) -> String {
    let mut s = crate::output::key_value(report);
    let _ = writeln!(s, "results written to {}", out.path("").display());
    s
}

pub fn cmd_fit(args: &ModelArgs) -> CliResult<String> {
    let p = prepare(args)?;
    let r = &p.settings;
    let fit = tuning::fit_method(&p.design.train, r.method, p.h, p.h, r.kernel, &p.grid)?;
    let pred = predict_test(&p, &fit.beta)?;

    let out = OutDir::create(&r.out)?;
    out.write_beta(&p.design.z_names, &fit.beta)?;
    let mut report = common_report(&p);
    report.push(("stage2_objective".into(), fit.objectives.stage2.to_string()));
    report.push(("degenerate_solves".into(), fit.diagnostics.degenerate_solves.to_string()));
    report.push(("unconverged_solves".into(), fit.diagnostics.unconverged_solves.to_string()));
    report.push(("intercept_crossings".into(), fit.diagnostics.intercept_crossings.to_string()));
    push_prediction(&mut report, &pred);
    out.write_report(&report)?;
    write_common(&out, &p, &fit.curves, &pred)?;
    Ok(summary(&out, &report))
}

/// Default regularization grid, or the explicit values.
pub fn lambda_grid(p: &Prepared, curves: &CurveSet, pilot: &[f64], loss: &vcplm::SparseLoss) -> CliResult<Vec<f64>> {
    let r = &p.settings;
    if let Some(l) = &r.lambdas {
        if l.is_empty() {
            return Err(CliError::Input("lambda list is empty".into()));
        }
        return Ok(l.clone());
    }
    let hi = lambda_max(&p.design.train, curves, pilot, loss)?;
    Ok(if hi == 0.0 { vec![0.0] } else { log_grid(hi, r.lambda_ratio, r.lambda_points) })
}

pub fn cmd_select(args: &ModelArgs) -> CliResult<String> {
    let p = prepare(args)?;
    let r = &p.settings;
    if p.design.train.d2() == 0 {
        return Err(CliError::Input("selection needs at least one linear covariate".into()));
    }
    let (pilot_curves, pilot, loss) = tuning::pilot_fit(&p.design.train, r.method, p.h, r.kernel)?;
    let lambdas = lambda_grid(&p, &pilot_curves, &pilot, &loss)?;
    let sel: SelectionResult = bic_select_with(&p.design.train, &pilot_curves, &pilot, loss, &lambdas)?;
    let curves = tuning::refine_curves(&p.design.train, r.method, &sel.beta, p.h, r.kernel, &p.grid)?;
    let pred = predict_test(&p, &sel.beta)?;

    let out = OutDir::create(&r.out)?;
    out.write_beta(&p.design.z_names, &sel.beta)?;
    let mut header: Vec<String> = ["lambda", "df", "loss", "bic"].map(String::from).into();
    header.extend(p.design.z_names.iter().cloned());
    let rows: Vec<Vec<String>> = sel
        .path
        .iter()
        .map(|pt| {
            let mut row = vec![pt.lambda.to_string(), pt.df.to_string(), pt.loss.to_string(), pt.bic.to_string()];
            row.extend(pt.beta.iter().map(f64::to_string));
            row
        })
        .collect();
    out.write_csv("path.csv", &header, &rows)?;
    let pilot_rows: Vec<Vec<String>> =
        p.design.z_names.iter().zip(&pilot).map(|(n, b)| vec![n.clone(), b.to_string()]).collect();
    out.write_csv("pilot_beta.csv", &["name".into(), "estimate".into()], &pilot_rows)?;

    let selected: Vec<&str> = sel.selected.iter().map(|&j| p.design.z_names[j].as_str()).collect();
    let mut report = common_report(&p);
    report.push(("lambda".into(), sel.lambda.to_string()));
    report.push(("df".into(), sel.df.to_string()));
    report.push(("bic".into(), sel.bic.to_string()));
    report.push(("bic_loss_clamped".into(), sel.loss_clamped.to_string()));
    report.push(("selected".into(), selected.join(";")));
    push_prediction(&mut report, &pred);
    out.write_report(&report)?;
    write_common(&out, &p, &curves, &pred)?;
    Ok(summary(&out, &report))
}

/// Simulation configuration: flags over the config file over defaults.
pub fn sim_config(a: &SimulateArgs, threads: Option<usize>) -> CliResult<SimConfig> {
    let mut c: SimConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SimConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = &a.$f { c.$f = v.clone(); })* };
    }
    set!(example, n, reps, dist, seed, h, convert_bandwidths, undersmooth, fit_baseline, q, lambda_points, lambda_ratio, grid_points);
    if let Some(levels) = &a.qr_levels {
        c.qr_levels = if levels.len() == 1 && levels[0].trim().eq_ignore_ascii_case("none") {
            Vec::new()
        } else {
            levels
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Input(format!("invalid quantile level '{s}'"))))
                .collect::<CliResult<_>>()?
        };
    }
    if threads.is_some() {
        c.threads = threads;
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_simulate(a: &SimulateArgs, threads: Option<usize>) -> CliResult<String> {
    let cfg = sim_config(a, threads)?;
    let report = run_monte_carlo(&cfg)?;
    let out = OutDir::create(a.out.as_deref().unwrap_or(DEFAULT_OUT.as_ref()))?;
    out.write_text("report.csv", &report.to_csv())?;
    out.write_text("report.txt", &report.to_key_value())?;
    let table = report.table_text();
    out.write_text("table.txt", &table)?;
    let mut meta = cfg.clone();
    meta.threads = None;
    let meta = toml::to_string(&meta).map_err(|e| CliError::Input(format!("cannot serialize configuration: {e}")))?;
    out.write_text("metadata.txt", &meta)?;
    if !report.failures.is_empty() {
        let rows: Vec<Vec<String>> = report
            .failures
            .iter()
            .map(|f| vec![f.rep.to_string(), f.method.clone(), f.message.clone()])
            .collect();
        out.write_csv("failures.csv", &["rep".into(), "method".into(), "message".into()], &rows)?;
    }
    Ok(format!("{table}\nresults written to {}\n", out.path("").display()))
}

pub fn cmd_efficiency(a: &EfficiencyArgs) -> CliResult<String> {
    let dists = match &a.dist {
        Some(names) => names.iter().map(|n| ErrorDist::from_name(n)).collect::<Result<Vec<_>, _>>()?,
        None => ErrorDist::builtins(),
    };
    if a.q.is_empty() || a.q.contains(&0) {
        return Err(CliError::Input("q values must be at least 1".into()));
    }
    let header: Vec<String> =
        ["dist", "q", "r1", "r2", "are_beta", "are_curves", "are_baseline", "bandwidth_ratio"].map(String::from).into();
    let mut rows = Vec::new();
    let mut text = format!(
        "{:<12}{:>5}{:>12}{:>12}{:>12}{:>12}{:>14}\n",
        "dist", "q", "are_beta", "are_curves", "are_base", "h_ratio", "1/r2"
    );
    for d in &dists {
        for e in are_report(d, &a.q)? {
            rows.push(vec![
                e.dist.clone(),
                e.q.to_string(),
                e.r1.to_string(),
                e.r2.to_string(),
                e.are_beta.to_string(),
                e.are_curves.to_string(),
                e.are_baseline.to_string(),
                e.bandwidth_ratio.to_string(),
            ]);
            let _ = writeln!(
                text,
                "{:<12}{:>5}{:>12.4}{:>12.4}{:>12.4}{:>12.4}{:>14.4}",
                e.dist,
                e.q,
                e.are_beta,
                e.are_curves,
                e.are_baseline,
                e.bandwidth_ratio,
                1.0 / e.r2
            );
        }
    }
    let out = OutDir::create(a.out.as_deref().unwrap_or(DEFAULT_OUT.as_ref()))?;
    out.write_csv("efficiency.csv", &header, &rows)?;
    let _ = writeln!(text, "results written to {}", out.path("").display());
    Ok(text)
}
