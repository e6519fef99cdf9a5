//! Replicated fitting-error and AUC comparison of the classical and robust
//! pipelines on simulated data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fitting_error, simulate, Scenario, ScenarioConfig, SimError, SimulatedDataset};
use crate::fpca::FpcaMethod;
use crate::model_select::{fit_grid, Criterion, FlrModel, SelectConfig};
use crate::outlier::{direct_depths, h_modal_depth, bandwidth_percentile, pairwise_l2, roc_auc};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub a_list: Vec<f64>,
    /// Retained fractions for the robust pipeline.
    pub alpha_list: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub n: usize,
    pub t: usize,
    /// Base settings for every fit; method, criterion and α are overridden.
    pub select: SelectConfig,
    pub bandwidth_percentile: f64,
    pub include_classical: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::Shift, Scenario::Bump],
            a_list: vec![0.0, 0.1, 0.2, 0.3],
            alpha_list: vec![0.8],
            reps: 20,
            seed: 0,
            n: 200,
            t: 200,
            select: SelectConfig::default(),
            bandwidth_percentile: 15.0,
            include_classical: true,
        }
    }
}

/// One fitted model on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: Scenario,
    pub a: f64,
    pub method: FpcaMethod,
    /// Retained fraction (1 for the classical pipeline).
    pub alpha: f64,
    pub criterion: Criterion,
    pub rep: usize,
    #[serde(rename = "FE")]
    pub fe: f64,
    #[serde(rename = "AUC_model")]
    pub auc_model: Option<f64>,
    #[serde(rename = "AUC_direct")]
    pub auc_direct: Option<f64>,
    #[serde(rename = "selected_M")]
    pub selected_m: usize,
    #[serde(rename = "selected_K")]
    pub selected_k: usize,
}

/// Means over replicates of one `(scenario, a, method, alpha, criterion)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub a: f64,
    pub method: FpcaMethod,
    pub alpha: f64,
    pub criterion: Criterion,
    pub reps: usize,
    #[serde(rename = "mean_FE")]
    pub mean_fe: f64,
    #[serde(rename = "mean_AUC_model")]
    pub mean_auc_model: Option<f64>,
    #[serde(rename = "mean_AUC_direct")]
    pub mean_auc_direct: Option<f64>,
    /// Fraction of replicates selecting `(M, K) = (3, 3)`.
    pub frac_selected_3_3: f64,
}

/// Seed of the dataset for one replicate; shared by every method so that
/// methods are compared on identical data.
pub fn dataset_seed(seed: u64, scenario: Scenario, a: f64, rep: usize) -> u64 {
    rng::stream_key(seed, &format!("benchmark-s{}-a{a}", scenario.number()), rep as u64)
}

fn residual_auc(model: &FlrModel, data: &SimulatedDataset, percentile: f64) -> Result<Option<f64>, String> {
    if data.num_outliers() == 0 {
        return Ok(None);
    }
    let res = model.residual_curves(&data.x, &data.y).map_err(|e| e.to_string())?;
    let dist = pairwise_l2(&res);
    let bw = bandwidth_percentile(&dist, percentile).map_err(|e| e.to_string())?;
    let depths = h_modal_depth(&dist, bw.h);
    Ok(Some(roc_auc(&depths, &data.outlier_flags).map_err(|e| e.to_string())?.auc))
}

fn one_replicate(cfg: &BenchmarkConfig, scenario: Scenario, a: f64, rep: usize) -> Result<Vec<BenchmarkRow>, String> {
    let scfg = ScenarioConfig {
        scenario,
        n: cfg.n,
        t: cfg.t,
        a,
        seed: dataset_seed(cfg.seed, scenario, a, rep),
        ..Default::default()
    };
    let data = simulate(&scfg).map_err(|e| e.to_string())?;
    let auc_direct = if data.num_outliers() > 0 {
        let d = direct_depths(&data.y, cfg.bandwidth_percentile).map_err(|e| e.to_string())?;
        Some(roc_auc(&d, &data.outlier_flags).map_err(|e| e.to_string())?.auc)
    } else {
        None
    };

    let mut fits: Vec<(SelectConfig, Vec<Criterion>)> = Vec::new();
    if cfg.include_classical {
        fits.push((SelectConfig { method: FpcaMethod::Classical, alpha: 1.0, ..cfg.select.clone() }, vec![Criterion::Bic]));
    }
    for &alpha in &cfg.alpha_list {
        let mut select = SelectConfig { method: FpcaMethod::Robust, alpha, ..cfg.select.clone() };
        select.mlts.seed = rng::stream_key(scfg.seed, "benchmark-mlts", 0);
        fits.push((select, vec![Criterion::Bic, Criterion::Rbic]));
    }

    let mut rows = Vec::new();
    for (select, criteria) in fits {
        let grid = fit_grid(&data.x, &data.y, &select).map_err(|e| e.to_string())?;
        for criterion in criteria {
            let model = grid.select(criterion).map_err(|e| e.to_string())?;
            let yhat = model.predict_curves(&data.x).map_err(|e| e.to_string())?;
            let fe = fitting_error(&data.y, &yhat, &data.outlier_flags).map_err(|e| e.to_string())?;
            rows.push(BenchmarkRow {
                scenario,
                a,
                method: select.method,
                alpha: select.effective_alpha(),
                criterion,
                rep,
                fe,
                auc_model: residual_auc(&model, &data, cfg.bandwidth_percentile)?,
                auc_direct,
                selected_m: model.m,
                selected_k: model.k,
            });
        }
    }
    Ok(rows)
}

/// Run every `(scenario, a, rep)` combination; rows come back ordered by
/// scenario, then `a`, then replicate.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>, SimError> {
    let tasks: Vec<(Scenario, f64, usize)> = cfg
        .scenarios
        .iter()
        .flat_map(|&s| cfg.a_list.iter().flat_map(move |&a| (0..cfg.reps).map(move |r| (s, a, r))))
        .collect();
    let results: Vec<Result<Vec<BenchmarkRow>, String>> =
        tasks.par_iter().map(|&(s, a, r)| one_replicate(cfg, s, a, r)).collect();
    let mut rows = Vec::new();
    for (res, (s, a, r)) in results.into_iter().zip(&tasks) {
        rows.extend(res.map_err(|e| SimError::Pipeline(format!("scenario {s}, a = {a}, rep {r}: {e}")))?);
    }
    Ok(rows)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Aggregate rows by configuration, in order of first appearance.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Scenario, f64, FpcaMethod, f64, Criterion)> = Vec::new();
    for r in rows {
        let key = (r.scenario, r.a, r.method, r.alpha, r.criterion);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(scenario, a, method, alpha, criterion)| {
            let group: Vec<&BenchmarkRow> = rows
                .iter()
                .filter(|r| (r.scenario, r.a, r.method, r.alpha, r.criterion) == (scenario, a, method, alpha, criterion))
                .collect();
            let reps = group.len();
            SummaryRow {
                scenario,
                a,
                method,
                alpha,
                criterion,
                reps,
                mean_fe: mean_of(group.iter().map(|r| r.fe)).unwrap_or(f64::NAN),
                mean_auc_model: mean_of(group.iter().filter_map(|r| r.auc_model)),
                mean_auc_direct: mean_of(group.iter().filter_map(|r| r.auc_direct)),
                frac_selected_3_3: group.iter().filter(|r| r.selected_m == 3 && r.selected_k == 3).count() as f64
                    / reps as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, fe: f64, auc: Option<f64>, mk: (usize, usize)) -> BenchmarkRow {
        BenchmarkRow {
            scenario: Scenario::Shift,
            a: 0.1,
            method: FpcaMethod::Robust,
            alpha: 0.8,
            criterion: Criterion::Rbic,
            rep,
            fe,
            auc_model: auc,
            auc_direct: Some(0.5),
            selected_m: mk.0,
            selected_k: mk.1,
        }
    }

    #[test]
    fn summary_means_match_columns() {
        let rows = vec![row(0, 1.0, Some(0.9), (3, 3)), row(1, 2.0, Some(1.0), (3, 2)), row(2, 4.5, None, (3, 3))];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].reps, 3);
        assert!((s[0].mean_fe - 7.5 / 3.0).abs() <= 1e-12);
        assert!((s[0].mean_auc_model.unwrap() - 0.95).abs() <= 1e-12);
        assert!((s[0].frac_selected_3_3 - 2.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn dataset_seeds_differ_by_replicate_and_setting() {
        let a = dataset_seed(1, Scenario::Shift, 0.1, 0);
        assert_ne!(a, dataset_seed(1, Scenario::Shift, 0.1, 1));
        assert_ne!(a, dataset_seed(1, Scenario::Bump, 0.1, 0));
        assert_ne!(a, dataset_seed(1, Scenario::Shift, 0.2, 0));
        assert_eq!(a, dataset_seed(1, Scenario::Shift, 0.1, 0));
    }
}
