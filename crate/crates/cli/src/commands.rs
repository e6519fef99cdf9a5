use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rfflr::model_select::{fit_grid, SelectConfig};
use rfflr::outlier::detect;
use rfflr::simgen::{run_benchmark, simulate, summarize, BenchmarkConfig};
use rfflr::{
    BSplineBasis, Criterion, CriterionScore, CurveSet, DepthConfig, FlrModel, FpcaMethod, MltsConfig, RobustPpConfig,
    ScaleEstimator, Scenario, ScenarioConfig, TimeGrid,
};
use serde::Serialize;

use crate::curves_csv::{self, fmt_f64};
use crate::document::{self, MatrixDoc, ModelDocument, Provenance};
use crate::error::{CliError, Result};
use crate::options::{
    required, BenchmarkOptions, DetectOptions, FitOptions, PredictOptions, ResampleOptions, SimulateOptions,
};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failed(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn to_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn scenario_of(n: u8) -> Result<Scenario> {
    Scenario::try_from(n).map_err(|_| CliError::input(format!("unknown scenario {n} (expected 1 or 2)")))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSettings {
    pub scenario: u8,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub a: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    schema_version: &'static str,
    tool_version: &'static str,
    settings: &'a SimulateSettings,
    num_outliers: usize,
    true_b: MatrixDoc,
}

pub fn resolve_simulate(opts: &SimulateOptions, seed: Option<u64>) -> SimulateSettings {
    let d = ScenarioConfig::default();
    SimulateSettings {
        scenario: opts.scenario.unwrap_or(1),
        n: opts.n.unwrap_or(d.n),
        t: opts.t.unwrap_or(d.t),
        a: opts.a.unwrap_or(d.a),
        noise_sd: opts.noise_sd.unwrap_or(d.noise_sd),
        seed: opts.seed.or(seed).unwrap_or(0),
    }
}

pub fn cmd_simulate(opts: &SimulateOptions, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let dir = required(&opts.out, "out")?;
    let s = resolve_simulate(opts, seed);
    let cfg = ScenarioConfig {
        scenario: scenario_of(s.scenario)?,
        n: s.n,
        t: s.t,
        a: s.a,
        noise_sd: s.noise_sd,
        seed: s.seed,
        ..Default::default()
    };
    let data = simulate(&cfg)?;
    create_dir(&dir)?;
    curves_csv::write_curves(&dir.join("x.csv"), &data.x)?;
    curves_csv::write_curves(&dir.join("y.csv"), &data.y)?;
    curves_csv::write_flags(&dir.join("truth.csv"), data.x.ids(), &data.outlier_flags)?;
    let meta = SimulateMeta {
        schema_version: document::SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        settings: &s,
        num_outliers: data.num_outliers(),
        true_b: MatrixDoc::from_matrix(&data.true_b),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    writeln!(out, "wrote {} samples ({} outliers) to {}", s.n, data.num_outliers(), dir.display())
        .map_err(io_err(&dir))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSettings {
    pub method: FpcaMethod,
    pub criterion: Criterion,
    pub alpha: f64,
    pub mmax: Option<usize>,
    pub kmax: Option<usize>,
    pub num_basis: usize,
    pub variance_threshold: f64,
    pub n_starts: usize,
    pub fpca: FpcaMethod,
    pub scale: ScaleEstimator,
    pub seed: u64,
}

impl FitSettings {
    pub fn select_config(&self) -> SelectConfig {
        let base = match self.method {
            FpcaMethod::Classical => SelectConfig::classical(),
            FpcaMethod::Robust => SelectConfig::default(),
        };
        SelectConfig {
            method: self.method,
            criterion: self.criterion,
            alpha: self.alpha,
            num_basis: self.num_basis,
            variance_threshold: self.variance_threshold,
            m_max: self.mmax,
            k_max: self.kmax,
            mlts: MltsConfig { alpha: self.alpha, n_starts: self.n_starts, seed: self.seed, ..MltsConfig::default() },
            robust_pp: RobustPpConfig { scale: self.scale, ..RobustPpConfig::default() },
            fpca: Some(self.fpca),
            ..base
        }
    }
}

pub fn resolve_fit(opts: &FitOptions, seed: Option<u64>) -> FitSettings {
    let method = opts.method.unwrap_or(FpcaMethod::Robust);
    let base = match method {
        FpcaMethod::Classical => SelectConfig::classical(),
        FpcaMethod::Robust => SelectConfig::default(),
    };
    let alpha = opts.alpha.unwrap_or(base.alpha);
    let trims = method == FpcaMethod::Robust && alpha < 1.0;
    FitSettings {
        method,
        criterion: opts.criterion.unwrap_or(base.criterion),
        alpha,
        mmax: opts.mmax,
        kmax: opts.kmax,
        num_basis: opts.num_basis.unwrap_or(base.num_basis),
        variance_threshold: opts.variance_threshold.unwrap_or(base.variance_threshold),
        n_starts: opts.n_starts.unwrap_or(base.mlts.n_starts),
        fpca: opts.fpca.unwrap_or(if trims { FpcaMethod::Robust } else { FpcaMethod::Classical }),
        scale: opts.scale.unwrap_or(base.robust_pp.scale),
        seed: opts.seed.or(seed).unwrap_or(0),
    }
}

fn fmt_score(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "failed".into()
    }
}

pub fn print_table(out: &mut dyn Write, criterion: Criterion, table: &[CriterionScore]) -> std::io::Result<()> {
    writeln!(out, "{:>3} {:>3} {:>14} {:>12} {:>14}", "M", "K", "deviance", "penalty", criterion.as_str())?;
    for s in table {
        writeln!(
            out,
            "{:>3} {:>3} {:>14} {:>12} {:>14}",
            s.m,
            s.k,
            fmt_score(s.deviance),
            fmt_score(s.penalty),
            fmt_score(s.total)
        )?;
    }
    Ok(())
}

fn check_pair(x: &CurveSet, y: &CurveSet) -> Result<()> {
    if x.len() != y.len() {
        return Err(CliError::input(format!("X has {} samples but Y has {}", x.len(), y.len())));
    }
    if let Some(i) = (0..x.len()).find(|&i| x.ids()[i] != y.ids()[i]) {
        return Err(CliError::input(format!(
            "sample {} has id `{}` in X but `{}` in Y",
            i + 1,
            x.ids()[i],
            y.ids()[i]
        )));
    }
    Ok(())
}

pub fn fit_model(x: &CurveSet, y: &CurveSet, s: &FitSettings) -> Result<FlrModel> {
    check_pair(x, y)?;
    let start = Instant::now();
    let grid = fit_grid(x, y, &s.select_config())?;
    info!("fitted {}x{} grid in {:.2?}", grid.m_max, grid.k_max, start.elapsed());
    Ok(grid.select(s.criterion)?)
}

pub fn cmd_fit(opts: &FitOptions, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let xp = required(&opts.x, "x")?;
    let yp = required(&opts.y, "y")?;
    let model_path = required(&opts.model, "model")?;
    let s = resolve_fit(opts, seed);
    let x = curves_csv::read_curves(&xp)?;
    let y = curves_csv::read_curves(&yp)?;
    let model = fit_model(&x, &y, &s)?;
    let provenance = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: s.seed,
        created_unix: document::created_unix(),
        inputs: vec![document::digest("x", &xp)?, document::digest("y", &yp)?],
        config: to_value(&s),
    };
    let doc = ModelDocument::from_model(&model, x.grid(), provenance);
    doc.save(&model_path)?;

    let w = io_err(&model_path);
    writeln!(out, "method {}, criterion {}, alpha {}", model.method.as_str(), model.criterion, model.alpha).map_err(&w)?;
    print_table(out, model.criterion, &model.criterion_table).map_err(&w)?;
    writeln!(out, "selected (M, K) = ({}, {})", model.m, model.k).map_err(&w)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelDocument, FlrModel)> {
    let doc = ModelDocument::load(path)?;
    let model = doc.to_model()?;
    Ok((doc, model))
}

fn check_grid(curves: &CurveSet, grid: &TimeGrid, what: &str) -> Result<()> {
    if curves.grid() != grid {
        return Err(CliError::input(format!(
            "{what} has {} time points on [{}, {}] but the model expects {} on [{}, {}]",
            curves.grid().len(),
            curves.grid().start(),
            curves.grid().end(),
            grid.len(),
            grid.start(),
            grid.end()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectSettings {
    pub delta: f64,
    pub n_boot: usize,
    pub bandwidth_percentile: f64,
    pub gamma: f64,
    pub trim: Option<f64>,
    pub seed: u64,
}

impl DetectSettings {
    pub fn depth_config(&self) -> DepthConfig {
        DepthConfig {
            bandwidth_percentile: self.bandwidth_percentile,
            delta: self.delta,
            n_boot: self.n_boot,
            smoothing_gamma: self.gamma,
            seed: self.seed,
            trim: self.trim,
        }
    }
}

pub fn resolve_detect(opts: &DetectOptions, seed: Option<u64>) -> DetectSettings {
    let d = DepthConfig::default();
    DetectSettings {
        delta: opts.delta.unwrap_or(d.delta),
        n_boot: opts.n_boot.unwrap_or(d.n_boot),
        bandwidth_percentile: opts.bandwidth_percentile.unwrap_or(d.bandwidth_percentile),
        gamma: opts.gamma.unwrap_or(d.smoothing_gamma),
        trim: opts.trim.or(d.trim),
        seed: opts.seed.or(seed).unwrap_or(0),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleDepth {
    pub id: String,
    pub depth: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectDocument {
    pub schema_version: &'static str,
    pub tool_version: &'static str,
    pub settings: DetectSettings,
    pub inputs: Vec<document::InputDigest>,
    pub n: usize,
    pub num_flagged: usize,
    pub bandwidth: f64,
    pub degenerate_bandwidth: bool,
    pub threshold: f64,
    pub per_boot_thresholds: Vec<f64>,
    pub samples: Vec<SampleDepth>,
}

/// CSV sibling of a JSON report path.
pub fn csv_sibling(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("csv")
    } else {
        let mut s = path.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    }
}

pub fn cmd_detect(opts: &DetectOptions, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mp = required(&opts.model, "model")?;
    let xp = required(&opts.x, "x")?;
    let yp = required(&opts.y, "y")?;
    let report_path = required(&opts.report, "report")?;
    let s = resolve_detect(opts, seed);
    let (doc, model) = load_model(&mp)?;
    let x = curves_csv::read_curves(&xp)?;
    let y = curves_csv::read_curves(&yp)?;
    check_pair(&x, &y)?;
    check_grid(&x, &doc.x_grid()?, "X")?;
    check_grid(&y, &model.y_grid, "Y")?;
    let report = detect(&model, &x, &y, &s.depth_config())?;

    let samples: Vec<SampleDepth> = report
        .ids
        .iter()
        .zip(&report.depths)
        .zip(&report.outlier_flags)
        .map(|((id, &depth), &outlier)| SampleDepth { id: id.clone(), depth, outlier })
        .collect();
    let doc = DetectDocument {
        schema_version: document::SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        settings: s,
        inputs: vec![document::digest("model", &mp)?, document::digest("x", &xp)?, document::digest("y", &yp)?],
        n: report.ids.len(),
        num_flagged: report.num_flagged(),
        bandwidth: report.bandwidth,
        degenerate_bandwidth: report.degenerate_bandwidth,
        threshold: report.threshold,
        per_boot_thresholds: report.per_boot_thresholds.clone(),
        samples,
    };
    write_json(&report_path, &doc)?;

    let csv_path = csv_sibling(&report_path);
    let mut wtr = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Failed(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Failed(format!("{}: {e}", csv_path.display()));
    wtr.write_record(["id", "depth", "flag"]).map_err(csv_err)?;
    for s in &doc.samples {
        wtr.write_record([s.id.clone(), fmt_f64(s.depth), if s.outlier { "1" } else { "0" }.into()])
            .map_err(csv_err)?;
    }
    wtr.flush().map_err(io_err(&csv_path))?;

    writeln!(out, "{} outliers of {}", doc.num_flagged, doc.n).map_err(io_err(&report_path))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSettings {
    pub scenarios: Vec<u8>,
    pub a_list: Vec<f64>,
    pub alpha_list: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub num_basis: usize,
    pub n_starts: usize,
    pub include_classical: bool,
    pub seed: u64,
}

pub fn resolve_benchmark(opts: &BenchmarkOptions, seed: Option<u64>) -> BenchmarkSettings {
    let d = BenchmarkConfig::default();
    BenchmarkSettings {
        scenarios: opts.scenarios.clone().unwrap_or_else(|| d.scenarios.iter().map(|s| s.number()).collect()),
        a_list: opts.a_list.clone().unwrap_or(d.a_list),
        alpha_list: opts.alpha_list.clone().unwrap_or(d.alpha_list),
        reps: opts.reps.unwrap_or(d.reps),
        n: opts.n.unwrap_or(d.n),
        t: opts.t.unwrap_or(d.t),
        num_basis: opts.num_basis.unwrap_or(d.select.num_basis),
        n_starts: opts.n_starts.unwrap_or(d.select.mlts.n_starts),
        include_classical: !opts.skip_classical,
        seed: opts.seed.or(seed).unwrap_or(0),
    }
}

impl BenchmarkSettings {
    pub fn config(&self) -> Result<BenchmarkConfig> {
        let d = BenchmarkConfig::default();
        let scenarios = self.scenarios.iter().map(|&s| scenario_of(s)).collect::<Result<Vec<_>>>()?;
        Ok(BenchmarkConfig {
            scenarios,
            a_list: self.a_list.clone(),
            alpha_list: self.alpha_list.clone(),
            reps: self.reps,
            seed: self.seed,
            n: self.n,
            t: self.t,
            select: SelectConfig {
                num_basis: self.num_basis,
                mlts: MltsConfig { n_starts: self.n_starts, ..MltsConfig::default() },
                ..d.select
            },
            include_classical: self.include_classical,
            ..d
        })
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    }
    wtr.flush().map_err(io_err(path))
}

pub fn cmd_benchmark(opts: &BenchmarkOptions, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let dir = required(&opts.out, "out")?;
    let s = resolve_benchmark(opts, seed);
    let cfg = s.config()?;
    for &a in &cfg.a_list {
        if !(0.0..0.5).contains(&a) {
            return Err(CliError::infeasible(format!("contamination fraction {a} is outside [0, 0.5)")));
        }
    }
    for &alpha in &cfg.alpha_list {
        if !(alpha > 0.5 && alpha <= 1.0) {
            return Err(CliError::infeasible(format!("retained fraction {alpha} is outside (0.5, 1]")));
        }
    }
    let start = Instant::now();
    let rows = run_benchmark(&cfg)?;
    info!("benchmark finished in {:.2?}", start.elapsed());
    let summary = summarize(&rows);
    create_dir(&dir)?;
    write_rows(&dir.join("benchmark.csv"), &rows)?;
    write_rows(&dir.join("summary.csv"), &summary)?;
    write_json(&dir.join("config.json"), &s)?;

    let w = io_err(&dir);
    writeln!(
        out,
        "{:>8} {:>5} {:>9} {:>5} {:>9} {:>4} {:>10} {:>9} {:>10}",
        "scenario", "a", "method", "alpha", "criterion", "reps", "mean_FE", "AUC", "AUC_dir"
    )
    .map_err(&w)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    for r in &summary {
        writeln!(
            out,
            "{:>8} {:>5} {:>9} {:>5} {:>9} {:>4} {:>10.4} {:>9} {:>10}",
            r.scenario.number(),
            r.a,
            r.method.as_str(),
            r.alpha,
            r.criterion.as_str(),
            r.reps,
            r.mean_fe,
            opt(r.mean_auc_model),
            opt(r.mean_auc_direct)
        )
        .map_err(&w)?;
    }
    Ok(())
}

pub fn cmd_predict(opts: &PredictOptions, out: &mut dyn Write) -> Result<()> {
    let mp = required(&opts.model, "model")?;
    let xp = required(&opts.x, "x")?;
    let op = required(&opts.out, "out")?;
    let (doc, model) = load_model(&mp)?;
    let x = curves_csv::read_curves(&xp)?;
    check_grid(&x, &doc.x_grid()?, "X")?;
    let yhat = model.predict_curves(&x)?;
    curves_csv::write_curves(&op, &yhat)?;
    writeln!(out, "predicted {} curves on {} points", yhat.len(), yhat.grid().len()).map_err(io_err(&op))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ResampleSettings {
    pub num_basis: usize,
    pub resample_points: usize,
}

pub fn resolve_resample(opts: &ResampleOptions) -> ResampleSettings {
    ResampleSettings {
        num_basis: opts.num_basis.unwrap_or(400),
        resample_points: opts.resample_points.unwrap_or(1000),
    }
}

/// Least-squares cubic spline through one series with time rescaled to
/// `[0, 1]`, evaluated on `grid`.
pub fn resample_series(times: &[f64], values: &[f64], num_basis: usize, grid: &TimeGrid) -> Result<Vec<f64>> {
    if times.len() < num_basis {
        return Err(CliError::input(format!(
            "{} observations cannot determine {num_basis} spline coefficients",
            times.len()
        )));
    }
    let (t0, t1) = (times[0], times[times.len() - 1]);
    let scaled: Vec<f64> = times.iter().map(|&t| ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)).collect();
    let basis = BSplineBasis::new((0.0, 1.0), num_basis, 3)?;
    let phi = basis.eval_points(&scaled)?;
    let qr = phi.qr();
    let r = qr.r();
    let max_diag = (0..num_basis).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..num_basis).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return Err(CliError::input("observation times leave some spline coefficients undetermined"));
    }
    let rhs = qr.q().transpose() * DVector::from_column_slice(values);
    let coefs = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| CliError::input("observation times leave some spline coefficients undetermined"))?;
    let b: DMatrix<f64> = basis.eval_basis(grid)?;
    Ok((b * coefs).iter().copied().collect())
}

pub fn cmd_resample(opts: &ResampleOptions, out: &mut dyn Write) -> Result<()> {
    let ip = required(&opts.input, "input")?;
    let op = required(&opts.out, "out")?;
    let s = resolve_resample(opts);
    let name = ip.display().to_string();
    let series = curves_csv::read_series_from(curves_csv::open(&ip)?, &name)?;
    let grid = TimeGrid::uniform(0.0, 1.0, s.resample_points)?;
    let rows: Vec<Vec<f64>> = series
        .par_iter()
        .map(|ser| {
            resample_series(&ser.times, &ser.values, s.num_basis, &grid)
                .map_err(|e| CliError::input(format!("{name}: series `{}`: {e}", ser.id)))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.concat();
    let samples = DMatrix::from_row_slice(rows.len(), grid.len(), &flat);
    let ids = series.iter().map(|s| s.id.clone()).collect();
    let curves = CurveSet::new(grid, samples, ids)?;
    curves_csv::write_curves(&op, &curves)?;
    writeln!(out, "resampled {} series onto {} points", curves.len(), s.resample_points).map_err(io_err(&op))?;
    Ok(())
}
