//! h-modal depth of residual curves and the bootstrap outlier rule.
//!
//! The depth of curve `i` is `D_i = (1/n) Σ_l exp(−(‖r_i − r_l‖/h)²/2)`
//! with `h` a percentile of the pairwise L² distances. A curve is flagged
//! when its depth falls below a threshold `C` estimated by a smoothed
//! bootstrap of the least outlying curves.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{CurveError, CurveSet, TimeGrid};
use crate::model_select::{FlrModel, SelectError};
use crate::rng;
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutlierError {
    #[error("invalid depth configuration: {0}")]
    InvalidConfig(String),
    #[error("{depths} depths but {truth} labels")]
    LengthMismatch { depths: usize, truth: usize },
    #[error("labels must contain both outliers and regular samples")]
    DegenerateTruth,
    #[error("at least two curves are needed")]
    TooFewCurves,
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

type Result<T> = std::result::Result<T, OutlierError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    /// Percentile (0–100) of pairwise distances used as bandwidth.
    pub bandwidth_percentile: f64,
    /// Probability `δ` that a regular curve falls below the threshold.
    pub delta: f64,
    pub n_boot: usize,
    /// Smoothing noise is Gaussian with covariance `γ Σ̂`.
    pub smoothing_gamma: f64,
    pub seed: u64,
    /// Fraction of least deep curves left out of the bootstrap pool;
    /// `None` trims the `δ` fraction.
    pub trim: Option<f64>,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { bandwidth_percentile: 15.0, delta: 0.01, n_boot: 200, smoothing_gamma: 0.05, seed: 0, trim: None }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(OutlierError::InvalidConfig(format!("delta {} is outside (0, 0.5)", self.delta)));
        }
        if self.n_boot == 0 {
            return Err(OutlierError::InvalidConfig("n_boot must be at least 1".into()));
        }
        if !(self.bandwidth_percentile > 0.0 && self.bandwidth_percentile <= 100.0) {
            return Err(OutlierError::InvalidConfig(format!(
                "bandwidth percentile {} is outside (0, 100]",
                self.bandwidth_percentile
            )));
        }
        if let Some(trim) = self.trim {
            if !(0.0..1.0).contains(&trim) {
                return Err(OutlierError::InvalidConfig(format!("trim {trim} is outside [0, 1)")));
            }
        }
        if !(self.smoothing_gamma >= 0.0) {
            return Err(OutlierError::InvalidConfig(format!("gamma {} is negative", self.smoothing_gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub ids: Vec<String>,
    pub depths: Vec<f64>,
    pub bandwidth: f64,
    /// Set when every pairwise distance was zero.
    pub degenerate_bandwidth: bool,
    pub threshold: f64,
    pub outlier_flags: Vec<bool>,
    pub per_boot_thresholds: Vec<f64>,
}

impl DepthReport {
    pub fn num_flagged(&self) -> usize {
        self.outlier_flags.iter().filter(|&&f| f).count()
    }
}

fn sq_distance(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y) * (x - y)).sum()
}

fn rows_of(samples: &DMatrix<f64>) -> Vec<Vec<f64>> {
    samples.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn pairwise_rows(rows: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let n = rows.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|l| sq_distance(&rows[i], &rows[l], w).sqrt()).collect())
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let l = i + 1 + off;
            d[(i, l)] = v;
            d[(l, i)] = v;
        }
    }
    d
}

/// Pairwise L² distances, integrated by the trapezoid rule on the grid.
pub fn pairwise_l2(curves: &CurveSet) -> DMatrix<f64> {
    pairwise_rows(&rows_of(curves.samples()), &curves.grid().trapezoid_weights())
}

/// Bandwidth from the pairwise distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub h: f64,
    pub degenerate: bool,
}

/// Empirical `percentile` of the off-diagonal distances `i < j`. When all
/// distances vanish the bandwidth falls back to machine epsilon and is
/// flagged as degenerate.
pub fn bandwidth_percentile(dist: &DMatrix<f64>, percentile: f64) -> Result<Bandwidth> {
    let n = dist.nrows();
    if n < 2 {
        return Err(OutlierError::TooFewCurves);
    }
    let mut pooled = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for l in i + 1..n {
            pooled.push(dist[(i, l)]);
        }
    }
    let h = stats::quantile(&pooled, percentile / 100.0);
    if h > 0.0 {
        Ok(Bandwidth { h, degenerate: false })
    } else {
        log::warn!("all pairwise distances are zero; bandwidth set to machine epsilon");
        Ok(Bandwidth { h: f64::EPSILON, degenerate: true })
    }
}

/// `D_i = (1/n) Σ_l exp(−(d_il / h)² / 2)`, including `l = i`.
pub fn h_modal_depth(dist: &DMatrix<f64>, h: f64) -> Vec<f64> {
    let n = dist.nrows();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|l| {
                    let u = dist[(i, l)] / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Bootstrap threshold `C` and the per-replicate thresholds `C_b`.
///
/// Replicates resample curves whose depth exceeds the `δ`-quantile of
/// `depths` (or the `trim`-quantile when set), perturb them with Gaussian noise of covariance `γ Σ̂`, and
/// take the `δ`-quantile of depths recomputed with bandwidth `h`.
pub fn bootstrap_threshold(
    res: &CurveSet,
    depths: &[f64],
    h: f64,
    cfg: &DepthConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let n = res.len();
    if depths.len() != n {
        return Err(OutlierError::LengthMismatch { depths: depths.len(), truth: n });
    }
    let cut = stats::quantile(depths, cfg.trim.unwrap_or(cfg.delta));
    let mut pool: Vec<usize> = (0..n).filter(|&i| depths[i] > cut).collect();
    if pool.is_empty() {
        pool = (0..n).collect();
    }
    if pool.len() < 10 {
        log::warn!("bootstrap pool holds only {} curves", pool.len());
    }
    let w = res.grid().trapezoid_weights();
    let samples = res.samples();
    let t = samples.ncols();

    let per_boot: Vec<f64> = (0..cfg.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(cfg.seed, "depth-bootstrap", b as u64);
            let picks: Vec<usize> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            let mut boot = samples.select_rows(&picks);
            if cfg.smoothing_gamma > 0.0 && n > 1 {
                let mean = boot.row_mean();
                let mut centred = boot.clone();
                for mut row in centred.row_iter_mut() {
                    row -= &mean;
                }
                let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
                let noise = g * centred * (cfg.smoothing_gamma / (n - 1) as f64).sqrt();
                boot += noise;
            }
            debug_assert_eq!(boot.ncols(), t);
            let dist = pairwise_rows(&rows_of(&boot), &w);
            let d = h_modal_depth(&dist, h);
            stats::quantile(&d, cfg.delta)
        })
        .collect();
    Ok((stats::median(&per_boot), per_boot))
}

/// Depths, bandwidth, threshold and flags for a set of residual curves.
pub fn detect_residuals(res: &CurveSet, cfg: &DepthConfig) -> Result<DepthReport> {
    cfg.validate()?;
    let dist = pairwise_l2(res);
    let bw = bandwidth_percentile(&dist, cfg.bandwidth_percentile)?;
    let depths = h_modal_depth(&dist, bw.h);
    let (threshold, per_boot_thresholds) = bootstrap_threshold(res, &depths, bw.h, cfg)?;
    let outlier_flags = depths.iter().map(|&d| d < threshold).collect();
    Ok(DepthReport {
        ids: res.ids().to_vec(),
        depths,
        bandwidth: bw.h,
        degenerate_bandwidth: bw.degenerate,
        threshold,
        outlier_flags,
        per_boot_thresholds,
    })
}

/// Outlier detection on the residual curves of a fitted model.
pub fn detect(model: &FlrModel, x: &CurveSet, y: &CurveSet, cfg: &DepthConfig) -> Result<DepthReport> {
    let res = model.residual_curves(x, y)?;
    detect_residuals(&res, cfg)
}

/// Depths of the curves themselves, without any regression.
pub fn direct_depths(curves: &CurveSet, percentile: f64) -> Result<Vec<f64>> {
    let dist = pairwise_l2(curves);
    let bw = bandwidth_percentile(&dist, percentile)?;
    Ok(h_modal_depth(&dist, bw.h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub false_positive_rate: Vec<f64>,
    pub true_positive_rate: Vec<f64>,
    pub auc: f64,
}

/// ROC curve and AUC treating low depth as evidence of an outlier. Tied
/// depths count one half, so the AUC is the Mann–Whitney statistic.
pub fn roc_auc(depths: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if depths.len() != truth.len() {
        return Err(OutlierError::LengthMismatch { depths: depths.len(), truth: truth.len() });
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(OutlierError::DegenerateTruth);
    }
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));

    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while j < order.len() && depths[order[j]] == depths[order[i]] {
            if truth[order[j]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        // Trapezoid over the tied block: each new negative sees every
        // earlier positive plus half of the tied ones.
        auc += dfp as f64 * (tp as f64 + 0.5 * dtp as f64);
        tp += dtp;
        fp += dfp;
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
        i = j;
    }
    Ok(RocCurve { false_positive_rate: fpr, true_positive_rate: tpr, auc: auc / (n_pos * n_neg) as f64 })
}

/// Grid shared by a set of residual curves; a convenience for callers that
/// build [`CurveSet`]s by hand.
pub fn residual_set(grid: &TimeGrid, samples: DMatrix<f64>) -> Result<CurveSet> {
    Ok(CurveSet::with_default_ids(grid.clone(), samples)?)
}
