//! Information criteria and the `(M, K)` grid search.
//!
//! Every cell of the grid regresses the first `K` response scores on the
//! first `M` predictor scores, rebuilds the fitted response curves and
//! scores the fit by its Gaussian deviance on the observation grid. The
//! classical criterion uses all curves; the robust one keeps the `r`
//! curves with the smallest residual norms and penalises with `log r`.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{
    center_classical, center_robust_l2, fit_expansion, BSplineBasis, CurveError, CurveSet, GramFactor, TimeGrid,
};
use crate::fpca::{
    fit_classical_fpca, fit_robust_fpca, kmax_by_variance, project_scores, FpcaError, FpcaMethod, FpcaModel,
    RobustPpConfig,
};
use crate::regression::{
    consistency_factor, fit_mlts, fit_ols, trimmed_size, MltsConfig, RegressionError, RegressionFit, MIN_SCALE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("noise scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("subset size {r} is outside [1, {n}]")]
    BadSubsetSize { r: usize, n: usize },
    #[error("predictor has {x} curves but response has {y}")]
    SampleMismatch { x: usize, y: usize },
    #[error("trimmed size r = {r} does not exceed M = {m}")]
    Infeasible { r: usize, m: usize },
    #[error("every cell of the model grid failed")]
    NoFeasibleCell,
    #[error("cell ({m}, {k}) is not part of the grid")]
    UnknownCell { m: usize, k: usize },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

type Result<T> = std::result::Result<T, SelectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    Rbic,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Bic => "bic",
            Criterion::Rbic => "rbic",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(Criterion::Bic),
            "rbic" => Ok(Criterion::Rbic),
            other => Err(format!("unknown criterion `{other}` (expected bic or rbic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub m: usize,
    pub k: usize,
    pub deviance: f64,
    pub penalty: f64,
    pub total: f64,
    /// Noise scale that entered the deviance.
    pub scale: f64,
}

impl CriterionScore {
    fn failed(m: usize, k: usize) -> Self {
        Self { m, k, deviance: f64::INFINITY, penalty: f64::INFINITY, total: f64::INFINITY, scale: f64::NAN }
    }
}

/// Number of free parameters `ω(M, K) = MK + 1`.
pub fn num_parameters(m: usize, k: usize) -> usize {
    m * k + 1
}

fn residual_matrix(yobs: &CurveSet, yhat: &CurveSet) -> Result<DMatrix<f64>> {
    if yobs.len() != yhat.len() {
        return Err(SelectError::SampleMismatch { x: yhat.len(), y: yobs.len() });
    }
    if yobs.grid().len() != yhat.grid().len() {
        return Err(CurveError::DimensionMismatch { expected: yobs.grid().len(), found: yhat.grid().len() }.into());
    }
    Ok(yobs.samples() - yhat.samples())
}

fn row_norms_sq(resid: &DMatrix<f64>) -> Vec<f64> {
    resid.row_iter().map(|r| r.norm_squared()).collect()
}

fn deviance_terms(norms_sq: &[f64], t: usize, v: f64) -> Vec<f64> {
    let t = t as f64;
    let constant = t * (2.0 * std::f64::consts::PI).ln() + 2.0 * t * v.ln();
    norms_sq.iter().map(|s| s / (v * v) + constant).collect()
}

/// Per-curve deviance `‖y_i − ŷ_i‖²/v² + T log 2π + 2T log v`.
pub fn curve_deviance(yobs: &CurveSet, yhat: &CurveSet, v: f64) -> Result<Vec<f64>> {
    if !(v > 0.0) {
        return Err(SelectError::NonPositiveScale(v));
    }
    let resid = residual_matrix(yobs, yhat)?;
    Ok(deviance_terms(&row_norms_sq(&resid), resid.ncols(), v))
}

/// Indices of the `r` curves with smallest residual norm and their summed
/// deviance.
pub fn trimmed_deviance(yobs: &CurveSet, yhat: &CurveSet, v: f64, r: usize) -> Result<(Vec<usize>, f64)> {
    if !(v > 0.0) {
        return Err(SelectError::NonPositiveScale(v));
    }
    let resid = residual_matrix(yobs, yhat)?;
    trimmed_from_residuals(&resid, v, r)
}

fn smallest_subset(norms_sq: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms_sq.len()).collect();
    idx.sort_by(|&a, &b| norms_sq[a].total_cmp(&norms_sq[b]).then(a.cmp(&b)));
    idx.truncate(r);
    idx.sort_unstable();
    idx
}

fn trimmed_from_residuals(resid: &DMatrix<f64>, v: f64, r: usize) -> Result<(Vec<usize>, f64)> {
    let n = resid.nrows();
    if r == 0 || r > n {
        return Err(SelectError::BadSubsetSize { r, n });
    }
    let norms = row_norms_sq(resid);
    let subset = smallest_subset(&norms, r);
    let kept: Vec<f64> = subset.iter().map(|&i| norms[i]).collect();
    let value = deviance_terms(&kept, resid.ncols(), v).iter().sum();
    Ok((subset, value))
}

/// BIC of a fit with residual curves `resid` (`n × T`), with `v` set to
/// its maximum-likelihood value.
pub fn bic(resid: &DMatrix<f64>, m: usize, k: usize) -> CriterionScore {
    let n = resid.nrows();
    let t = resid.ncols();
    let norms = row_norms_sq(resid);
    let rss: f64 = norms.iter().sum();
    let v = (rss / (n * t) as f64).sqrt().max(MIN_SCALE);
    let deviance = deviance_terms(&norms, t, v).iter().sum();
    let penalty = num_parameters(m, k) as f64 * (n as f64).ln();
    CriterionScore { m, k, deviance, penalty, total: deviance + penalty, scale: v }
}

/// RBIC of a fit: trimmed deviance over the `r = round(α n)` best curves
/// plus `ω(M, K) log r`. The scale is the consistency-corrected RMS of the
/// retained residuals.
pub fn rbic(resid: &DMatrix<f64>, m: usize, k: usize, alpha: f64) -> Result<CriterionScore> {
    let n = resid.nrows();
    let t = resid.ncols();
    let r = trimmed_size(alpha, n);
    if r == 0 || r > n {
        return Err(SelectError::BadSubsetSize { r, n });
    }
    let norms = row_norms_sq(resid);
    let subset = smallest_subset(&norms, r);
    let rss: f64 = subset.iter().map(|&i| norms[i]).sum();
    let v = (consistency_factor(alpha) * rss / (r * t) as f64).sqrt().max(MIN_SCALE);
    let (_, deviance) = trimmed_from_residuals(resid, v, r)?;
    let penalty = num_parameters(m, k) as f64 * (r as f64).ln();
    Ok(CriterionScore { m, k, deviance, penalty, total: deviance + penalty, scale: v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub method: FpcaMethod,
    pub criterion: Criterion,
    /// Retained fraction for the trimmed regression and RBIC. Ignored by
    /// the classical method, which always keeps every curve.
    pub alpha: f64,
    pub num_basis: usize,
    pub degree: usize,
    pub variance_threshold: f64,
    pub grid_cap: usize,
    pub m_max: Option<usize>,
    pub k_max: Option<usize>,
    pub mlts: MltsConfig,
    pub robust_pp: RobustPpConfig,
    /// FPCA estimator; `None` uses the one matching `method`.
    pub fpca: Option<FpcaMethod>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            method: FpcaMethod::Robust,
            criterion: Criterion::Rbic,
            alpha: 0.8,
            num_basis: 80,
            degree: 3,
            variance_threshold: 0.9999,
            grid_cap: 10,
            m_max: None,
            k_max: None,
            mlts: MltsConfig::default(),
            robust_pp: RobustPpConfig::default(),
            fpca: None,
        }
    }
}

impl SelectConfig {
    pub fn classical() -> Self {
        Self { method: FpcaMethod::Classical, criterion: Criterion::Bic, alpha: 1.0, ..Self::default() }
    }

    pub fn fpca_method(&self) -> FpcaMethod {
        self.fpca.unwrap_or(self.method)
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.method {
            FpcaMethod::Classical => 1.0,
            FpcaMethod::Robust => self.alpha,
        }
    }
}

/// One `(M, K)` cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub m: usize,
    pub k: usize,
    pub fit: Option<RegressionFit>,
    pub bic: CriterionScore,
    pub rbic: CriterionScore,
    pub error: Option<String>,
}

impl GridCell {
    pub fn score(&self, criterion: Criterion) -> &CriterionScore {
        match criterion {
            Criterion::Bic => &self.bic,
            Criterion::Rbic => &self.rbic,
        }
    }
}

/// Both FPCA fits and every scored cell.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub fpca_x: FpcaModel,
    pub fpca_y: FpcaModel,
    pub y_grid: TimeGrid,
    pub method: FpcaMethod,
    pub alpha: f64,
    pub m_max: usize,
    pub k_max: usize,
    /// Cells in row-major order over `M = 1..=m_max`, `K = 1..=k_max`.
    pub cells: Vec<GridCell>,
}

/// Tolerance under which two criterion values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Index of the minimising score; ties go to the smallest `M + K`, then
/// the smallest `M`.
pub fn argmin_scores<'a>(scores: impl IntoIterator<Item = &'a CriterionScore>) -> Option<usize> {
    let scores: Vec<&CriterionScore> = scores.into_iter().collect();
    let best = scores.iter().map(|s| s.total).filter(|t| t.is_finite()).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.total <= best + tol)
        .min_by_key(|(_, s)| (s.m + s.k, s.m))
        .map(|(i, _)| i)
}

impl GridFit {
    pub fn cell(&self, m: usize, k: usize) -> Option<&GridCell> {
        if m == 0 || k == 0 || m > self.m_max || k > self.k_max {
            return None;
        }
        self.cells.get((m - 1) * self.k_max + (k - 1))
    }

    pub fn table(&self, criterion: Criterion) -> Vec<CriterionScore> {
        self.cells.iter().map(|c| *c.score(criterion)).collect()
    }

    /// Model at the argmin of `criterion`.
    pub fn select(&self, criterion: Criterion) -> Result<FlrModel> {
        let idx = argmin_scores(self.cells.iter().map(|c| c.score(criterion))).ok_or(SelectError::NoFeasibleCell)?;
        let cell = &self.cells[idx];
        self.model_at(cell.m, cell.k, criterion)
    }

    /// Model at a fixed cell.
    pub fn model_at(&self, m: usize, k: usize, criterion: Criterion) -> Result<FlrModel> {
        let cell = self.cell(m, k).ok_or(SelectError::UnknownCell { m, k })?;
        let fit = cell.fit.as_ref().ok_or(SelectError::NoFeasibleCell)?;
        Ok(FlrModel {
            fpca_x: self.fpca_x.clone(),
            fpca_y: self.fpca_y.clone(),
            y_grid: self.y_grid.clone(),
            m,
            k,
            coef: fit.coef.clone(),
            scale: cell.score(criterion).scale,
            alpha: self.alpha,
            method: self.method,
            criterion,
            criterion_table: self.table(criterion),
        })
    }
}

/// The selected function-on-function regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlrModel {
    pub fpca_x: FpcaModel,
    pub fpca_y: FpcaModel,
    /// Grid on which response curves are observed and predicted.
    pub y_grid: TimeGrid,
    pub m: usize,
    pub k: usize,
    /// `M × K` score regression matrix.
    pub coef: DMatrix<f64>,
    pub scale: f64,
    pub alpha: f64,
    pub method: FpcaMethod,
    pub criterion: Criterion,
    pub criterion_table: Vec<CriterionScore>,
}

impl FlrModel {
    /// Predictor scores of new curves, expanded in the predictor basis.
    pub fn predictor_scores(&self, x: &CurveSet) -> Result<DMatrix<f64>> {
        let exp = fit_expansion(x, self.fpca_x.basis())?;
        Ok(project_scores(&self.fpca_x, &exp, self.m)?)
    }

    /// Response curves implied by predictor scores.
    pub fn curves_from_scores(&self, z: &DMatrix<f64>, ids: Vec<String>) -> Result<CurveSet> {
        let mean = self.fpca_y.mean_on(&self.y_grid)?;
        let phi = self.fpca_y.eigenfunctions_on(&self.y_grid, self.k)?;
        let mut yhat = z * &self.coef * phi.transpose();
        for mut row in yhat.row_iter_mut() {
            row += mean.transpose();
        }
        Ok(CurveSet::new(self.y_grid.clone(), yhat, ids)?)
    }

    pub fn predict_curves(&self, x: &CurveSet) -> Result<CurveSet> {
        let z = self.predictor_scores(x)?;
        self.curves_from_scores(&z, x.ids().to_vec())
    }

    pub fn residual_curves(&self, x: &CurveSet, y: &CurveSet) -> Result<CurveSet> {
        if x.len() != y.len() {
            return Err(SelectError::SampleMismatch { x: x.len(), y: y.len() });
        }
        let yhat = self.predict_curves(x)?;
        let resid = residual_matrix(y, &yhat)?;
        Ok(CurveSet::new(self.y_grid.clone(), resid, y.ids().to_vec())?)
    }

    /// `β(s, t)` on a grid.
    pub fn beta_on(&self, s: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
        Ok(crate::regression::BetaSurface::new(&self.fpca_x, &self.fpca_y, &self.coef)?.on_grid(s, t)?)
    }
}

fn fit_fpca(curves: &CurveSet, cfg: &SelectConfig) -> Result<(FpcaModel, DMatrix<f64>)> {
    let grid = curves.grid();
    let basis = BSplineBasis::new((grid.start(), grid.end()), cfg.num_basis, cfg.degree)?;
    let exp = fit_expansion(curves, &basis)?;
    let gf = GramFactor::new(&basis)?;
    let q = cfg.grid_cap.min(curves.len().saturating_sub(1)).min(basis.num_basis()).max(1);
    let model = match cfg.fpca_method() {
        FpcaMethod::Classical => fit_classical_fpca(&center_classical(&exp), &gf, q)?,
        FpcaMethod::Robust => fit_robust_fpca(&center_robust_l2(&exp, &gf)?, &gf, q, &cfg.robust_pp)?,
    };
    let scores = project_scores(&model, &exp, model.num_components())?;
    Ok((model, scores))
}

/// Fit both FPCAs and score every `(M, K)` cell under both criteria.
pub fn fit_grid(x: &CurveSet, y: &CurveSet, cfg: &SelectConfig) -> Result<GridFit> {
    if x.len() != y.len() {
        return Err(SelectError::SampleMismatch { x: x.len(), y: y.len() });
    }
    let alpha = cfg.effective_alpha();
    let mlts = MltsConfig { alpha, ..cfg.mlts.clone() };
    mlts.validate()?;
    let n = x.len();
    let r = trimmed_size(alpha, n);

    let (fx, fy) = rayon::join(|| fit_fpca(x, cfg), || fit_fpca(y, cfg));
    let (fpca_x, zx) = fx?;
    let (fpca_y, zy) = fy?;

    let m_max = cfg
        .m_max
        .unwrap_or_else(|| kmax_by_variance(&fpca_x, cfg.variance_threshold, cfg.grid_cap))
        .min(fpca_x.num_components());
    let k_max = cfg
        .k_max
        .unwrap_or_else(|| kmax_by_variance(&fpca_y, cfg.variance_threshold, cfg.grid_cap))
        .min(fpca_y.num_components());
    if m_max == 0 || k_max == 0 {
        return Err(SelectError::NoFeasibleCell);
    }
    if r <= m_max {
        return Err(SelectError::Infeasible { r, m: m_max });
    }

    let y_grid = y.grid().clone();
    let mean_y = fpca_y.mean_on(&y_grid)?;
    let phi_y = fpca_y.eigenfunctions_on(&y_grid, k_max)?;
    let mut y_centered = y.samples().clone();
    for mut row in y_centered.row_iter_mut() {
        row -= mean_y.transpose();
    }

    let cells: Vec<GridCell> = (0..m_max * k_max)
        .into_par_iter()
        .map(|idx| {
            let m = idx / k_max + 1;
            let k = idx % k_max + 1;
            let z = zx.columns(0, m).into_owned();
            let w = zy.columns(0, k).into_owned();
            let fit = match cfg.method {
                FpcaMethod::Classical => fit_ols(&z, &w),
                FpcaMethod::Robust => fit_mlts(&z, &w, &mlts),
            };
            let scored = fit.map_err(SelectError::from).and_then(|fit| {
                let resid = &y_centered - &z * &fit.coef * phi_y.columns(0, k).transpose();
                let b = bic(&resid, m, k);
                let rb = rbic(&resid, m, k, alpha)?;
                Ok((fit, b, rb))
            });
            match scored {
                Ok((fit, bic, rbic)) => GridCell { m, k, fit: Some(fit), bic, rbic, error: None },
                Err(err) => {
                    log::warn!("cell ({m}, {k}) failed: {err}");
                    GridCell {
                        m,
                        k,
                        fit: None,
                        bic: CriterionScore::failed(m, k),
                        rbic: CriterionScore::failed(m, k),
                        error: Some(err.to_string()),
                    }
                }
            }
        })
        .collect();

    Ok(GridFit { fpca_x, fpca_y, y_grid, method: cfg.method, alpha, m_max, k_max, cells })
}

/// Grid search followed by selection under `cfg.criterion`.
pub fn select_model(x: &CurveSet, y: &CurveSet, cfg: &SelectConfig) -> Result<FlrModel> {
    fit_grid(x, y, cfg)?.select(cfg.criterion)
}
