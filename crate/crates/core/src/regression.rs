//! Multivariate regression of response scores on predictor scores.
//!
//! [`fit_ols`] is ordinary least squares. [`fit_mlts`] minimises the
//! trimmed residual sum `Σ_{i∈S} ‖w_i − z_i B‖²` over subsets `S` of size
//! `r`, using random elemental starts followed by concentration steps
//! (refit on the subset, keep the `r` smallest residual norms, repeat).

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::fpca::{FpcaError, FpcaModel};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("trimmed size r = {r} does not exceed the {m} predictor components")]
    Infeasible { r: usize, m: usize },
    #[error("retained fraction {0} is outside (0.5, 1]")]
    InvalidAlpha(f64),
    #[error("predictor has {z} rows but response has {w}")]
    RowMismatch { z: usize, w: usize },
    #[error("every elemental start was singular")]
    NoValidStart,
    #[error(transparent)]
    Fpca(#[from] FpcaError),
}

type Result<T> = std::result::Result<T, RegressionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MltsConfig {
    /// Retained fraction α; the subset size is `r = round(α n)`.
    pub alpha: f64,
    pub n_starts: usize,
    pub keep_best: usize,
    pub max_csteps: usize,
    pub seed: u64,
}

impl Default for MltsConfig {
    fn default() -> Self {
        Self { alpha: 0.8, n_starts: 500, keep_best: 10, max_csteps: 100, seed: 0 }
    }
}

impl MltsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(RegressionError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Objective values recorded while concentrating each start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MltsDiagnostics {
    pub singular_starts: usize,
    /// One trace per start with the objective after every concentration
    /// step, followed by one trace for the exchange refinement of the winner.
    pub traces: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    /// `M × K` regression matrix.
    pub coef: DMatrix<f64>,
    /// Sorted indices of the retained samples.
    pub subset: Vec<usize>,
    /// Noise scale estimate.
    pub scale: f64,
    pub alpha: f64,
    /// Residual sum of squares over `subset`.
    pub objective: f64,
    pub diagnostics: Option<MltsDiagnostics>,
}

/// `r = round(α n)` with halves rounded up.
pub fn trimmed_size(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + 0.5).floor() as usize
}

fn check_rows(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<()> {
    if z.nrows() != w.nrows() {
        return Err(RegressionError::RowMismatch { z: z.nrows(), w: w.nrows() });
    }
    Ok(())
}

/// Least squares on the rows in `rows` by QR; `None` if rank deficient.
fn ls_on_rows(z: &DMatrix<f64>, w: &DMatrix<f64>, rows: &[usize]) -> Option<DMatrix<f64>> {
    let m = z.ncols();
    if rows.len() < m {
        return None;
    }
    let zs = z.select_rows(rows);
    let ws = w.select_rows(rows);
    ls_solve(zs, &ws)
}

fn ls_solve(zs: DMatrix<f64>, ws: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = zs.ncols();
    let scale = zs.amax();
    let qr = zs.qr();
    let r = qr.r();
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE) * (r.nrows().max(1) as f64);
    if (0..m).any(|i| r[(i, i)].abs() <= tol) {
        return None;
    }
    let rhs = qr.q().transpose() * ws;
    r.solve_upper_triangular(&rhs)
}

fn residual_norms_sq(z: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let resid = w - z * b;
    resid.row_iter().map(|r| r.norm_squared()).collect()
}

/// Indices of the `r` smallest values (ties by index), sorted ascending.
fn smallest_r(values: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut s = idx[..r].to_vec();
    s.sort_unstable();
    s
}

fn subset_objective(norms: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&i| norms[i]).sum()
}

/// Ordinary least squares on all samples.
pub fn fit_ols(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<RegressionFit> {
    check_rows(z, w)?;
    let n = z.nrows();
    if n <= z.ncols() {
        return Err(RegressionError::SingularDesign);
    }
    let coef = ls_solve(z.clone(), w).ok_or(RegressionError::SingularDesign)?;
    let norms = residual_norms_sq(z, w, &coef);
    let objective = norms.iter().sum();
    let subset: Vec<usize> = (0..n).collect();
    let mut fit = RegressionFit { coef, subset, scale: 0.0, alpha: 1.0, objective, diagnostics: None };
    fit.scale = estimate_scale(z, w, &fit);
    Ok(fit)
}

struct Concentrated {
    subset: Vec<usize>,
    coef: DMatrix<f64>,
    objective: f64,
    converged: bool,
}

/// Run up to `steps` concentration steps starting from `coef`.
fn concentrate(
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    r: usize,
    mut coef: DMatrix<f64>,
    mut subset: Option<Vec<usize>>,
    steps: usize,
    trace: &mut Vec<f64>,
) -> Option<Concentrated> {
    let mut objective = f64::INFINITY;
    for _ in 0..steps {
        let norms = residual_norms_sq(z, w, &coef);
        let next = smallest_r(&norms, r);
        if subset.as_ref() == Some(&next) {
            return Some(Concentrated { subset: next, coef, objective, converged: true });
        }
        coef = ls_on_rows(z, w, &next)?;
        let norms = residual_norms_sq(z, w, &coef);
        objective = subset_objective(&norms, &next);
        trace.push(objective);
        subset = Some(next);
    }
    let subset = subset?;
    Some(Concentrated { subset, coef, objective, converged: false })
}

/// Residual sum of squares after swapping row `out` of the current subset
/// for row `inn`, from the subset's normal-equation blocks.
fn swapped_rss(
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    blocks: &(DMatrix<f64>, DMatrix<f64>, f64),
    out: usize,
    inn: usize,
) -> Option<f64> {
    let (zz, zw, ww) = blocks;
    let (zo, zi) = (z.row(out).transpose(), z.row(inn).transpose());
    let (wo, wi) = (w.row(out), w.row(inn));
    let a = zz - &zo * zo.transpose() + &zi * zi.transpose();
    let c = zw - &zo * wo + &zi * wi;
    let t = ww - wo.norm_squared() + wi.norm_squared();
    let b = a.cholesky()?.solve(&c);
    Some(t - c.dot(&b))
}

/// Single-row exchanges on the final subset: swap one retained row for one
/// trimmed row while that lowers the objective, concentrating after each
/// accepted swap. Ends at a subset no single swap improves.
fn exchange_refine(
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    r: usize,
    mut best: Concentrated,
    max_csteps: usize,
    trace: &mut Vec<f64>,
) -> Concentrated {
    const MAX_EXCHANGES: usize = 200;
    let n = z.nrows();
    for _ in 0..MAX_EXCHANGES {
        let zs = z.select_rows(&best.subset);
        let ws = w.select_rows(&best.subset);
        let blocks = (zs.transpose() * &zs, zs.transpose() * &ws, ws.norm_squared());
        let mut inside = vec![false; n];
        for &i in &best.subset {
            inside[i] = true;
        }
        let target = best.objective - 1e-10 * best.objective.abs().max(f64::MIN_POSITIVE);
        let mut pick: Option<(f64, usize, usize)> = None;
        for &out in &best.subset {
            for inn in (0..n).filter(|&j| !inside[j]) {
                if let Some(rss) = swapped_rss(z, w, &blocks, out, inn) {
                    if rss < target && pick.is_none_or(|(p, _, _)| rss < p) {
                        pick = Some((rss, out, inn));
                    }
                }
            }
        }
        let Some((_, out, inn)) = pick else { break };
        let mut rows: Vec<usize> = best.subset.iter().map(|&i| if i == out { inn } else { i }).collect();
        rows.sort_unstable();
        let Some(coef) = ls_on_rows(z, w, &rows) else { break };
        let objective = subset_objective(&residual_norms_sq(z, w, &coef), &rows);
        if !(objective < best.objective) {
            break;
        }
        trace.push(objective);
        let swapped = Concentrated { subset: rows.clone(), coef: coef.clone(), objective, converged: false };
        best = match concentrate(z, w, r, coef, Some(rows), max_csteps, trace) {
            Some(mut c) => {
                if !c.objective.is_finite() {
                    c.objective = objective;
                }
                if c.objective <= objective {
                    c
                } else {
                    swapped
                }
            }
            None => swapped,
        };
    }
    best
}

fn better(a: &Concentrated, b: &Concentrated) -> bool {
    match a.objective.total_cmp(&b.objective) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a.subset < b.subset,
    }
}

/// Trimmed multivariate least squares with `r = round(α n)`.
pub fn fit_mlts(z: &DMatrix<f64>, w: &DMatrix<f64>, cfg: &MltsConfig) -> Result<RegressionFit> {
    cfg.validate()?;
    let r = trimmed_size(cfg.alpha, z.nrows());
    fit_mlts_with_size(z, w, r, cfg)
}

/// [`fit_mlts`] with an explicit subset size; `cfg.alpha` is only used for
/// the scale consistency factor.
pub fn fit_mlts_with_size(
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    r: usize,
    cfg: &MltsConfig,
) -> Result<RegressionFit> {
    check_rows(z, w)?;
    let n = z.nrows();
    let m = z.ncols();
    if r <= m || r > n {
        return Err(RegressionError::Infeasible { r, m });
    }
    if r == n {
        let mut fit = fit_ols(z, w)?;
        fit.alpha = cfg.alpha;
        fit.diagnostics = Some(MltsDiagnostics::default());
        return Ok(fit);
    }

    const ELEMENTAL_ATTEMPTS: usize = 50;
    const INITIAL_STEPS: usize = 2;
    let starts: Vec<(Option<Concentrated>, usize, Vec<f64>)> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(cfg.seed, "mlts-start", s as u64);
            let mut singular = 0;
            let mut trace = Vec::new();
            for _ in 0..ELEMENTAL_ATTEMPTS {
                let mut rows = sample(&mut rng, n, (m + 1).min(n)).into_vec();
                rows.sort_unstable();
                match ls_on_rows(z, w, &rows) {
                    Some(coef) => {
                        let c = concentrate(z, w, r, coef, None, INITIAL_STEPS, &mut trace);
                        if c.is_none() {
                            singular += 1;
                        }
                        return (c, singular, trace);
                    }
                    None => singular += 1,
                }
            }
            (None, singular, trace)
        })
        .collect();

    let mut diagnostics = MltsDiagnostics::default();
    let mut partial: Vec<(usize, Concentrated)> = Vec::new();
    for (s, (c, singular, trace)) in starts.into_iter().enumerate() {
        diagnostics.singular_starts += singular;
        diagnostics.traces.push(trace);
        if let Some(c) = c {
            partial.push((s, c));
        }
    }
    if partial.is_empty() {
        return Err(RegressionError::NoValidStart);
    }
    partial.sort_by(|a, b| {
        a.1.objective.total_cmp(&b.1.objective).then_with(|| a.1.subset.cmp(&b.1.subset))
    });
    partial.dedup_by(|a, b| a.1.subset == b.1.subset);
    partial.truncate(cfg.keep_best.max(1));

    let finished: Vec<(usize, Concentrated, Vec<f64>)> = partial
        .into_par_iter()
        .map(|(s, c)| {
            let mut trace = Vec::new();
            if c.converged {
                return (s, c, trace);
            }
            let objective = c.objective;
            let next = concentrate(z, w, r, c.coef.clone(), Some(c.subset.clone()), cfg.max_csteps, &mut trace)
                .map(|mut d| {
                    if !d.objective.is_finite() {
                        d.objective = objective;
                    }
                    d
                })
                .unwrap_or(c);
            (s, next, trace)
        })
        .collect();

    let mut best: Option<Concentrated> = None;
    for (s, c, trace) in finished {
        diagnostics.traces[s].extend(trace);
        if best.as_ref().is_none_or(|b| better(&c, b)) {
            best = Some(c);
        }
    }
    let mut trace = Vec::new();
    let best = exchange_refine(z, w, r, best.expect("at least one start survived"), cfg.max_csteps, &mut trace);
    diagnostics.traces.push(trace);
    let mut fit = RegressionFit {
        coef: best.coef,
        subset: best.subset,
        scale: 0.0,
        alpha: cfg.alpha,
        objective: best.objective,
        diagnostics: Some(diagnostics),
    };
    fit.scale = estimate_scale(z, w, &fit);
    Ok(fit)
}

/// Gaussian consistency factor for a variance computed from the `α`
/// fraction of smallest squared residuals: `α / F_{χ²₃}(q_α)` with `q_α`
/// the `α`-quantile of `χ²₁`.
pub fn consistency_factor(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let chi1 = ChiSquared::new(1.0).expect("valid dof");
    let chi3 = ChiSquared::new(3.0).expect("valid dof");
    let q = chi1.inverse_cdf(alpha);
    alpha / chi3.cdf(q)
}

/// `v² = κ(α) · Σ_{i∈S} ‖row_i‖² / (|S| · d)` for residual rows of
/// dimension `d`. Floors at a tiny positive value so that `v > 0`.
pub fn trimmed_scale(residuals: &DMatrix<f64>, subset: &[usize], alpha: f64) -> f64 {
    let d = residuals.ncols().max(1);
    let ss: f64 = subset.iter().map(|&i| residuals.row(i).norm_squared()).sum();
    let v2 = consistency_factor(alpha) * ss / (subset.len().max(1) * d) as f64;
    v2.sqrt().max(MIN_SCALE)
}

/// Smallest scale ever reported.
pub const MIN_SCALE: f64 = 1e-150;

/// Noise scale of a score-space fit from its retained residuals.
pub fn estimate_scale(z: &DMatrix<f64>, w: &DMatrix<f64>, fit: &RegressionFit) -> f64 {
    let resid = residual_scores(w, z, &fit.coef);
    trimmed_scale(&resid, &fit.subset, fit.alpha)
}

pub fn predict_scores(z: &DMatrix<f64>, coef: &DMatrix<f64>) -> DMatrix<f64> {
    z * coef
}

pub fn residual_scores(w: &DMatrix<f64>, z: &DMatrix<f64>, coef: &DMatrix<f64>) -> DMatrix<f64> {
    w - z * coef
}

/// `β(s, t) = φ^X(s)ᵀ B φ^Y(t)` for two sets of eigenfunctions.
#[derive(Debug, Clone)]
pub struct BetaSurface<'a> {
    x: &'a FpcaModel,
    y: &'a FpcaModel,
    coef: &'a DMatrix<f64>,
}

impl<'a> BetaSurface<'a> {
    pub fn new(x: &'a FpcaModel, y: &'a FpcaModel, coef: &'a DMatrix<f64>) -> Result<Self> {
        if coef.nrows() > x.num_components() {
            return Err(FpcaError::TooManyComponents { requested: coef.nrows(), available: x.num_components() }.into());
        }
        if coef.ncols() > y.num_components() {
            return Err(FpcaError::TooManyComponents { requested: coef.ncols(), available: y.num_components() }.into());
        }
        Ok(Self { x, y, coef })
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let (m, k) = self.coef.shape();
        let px: Vec<f64> = (0..m)
            .map(|j| self.x.basis().eval_spline(self.x.eigen_coefs().row(j).transpose().as_slice(), s))
            .collect();
        let py: Vec<f64> = (0..k)
            .map(|j| self.y.basis().eval_spline(self.y.eigen_coefs().row(j).transpose().as_slice(), t))
            .collect();
        let mut acc = 0.0;
        for a in 0..m {
            for b in 0..k {
                acc += px[a] * self.coef[(a, b)] * py[b];
            }
        }
        acc
    }

    /// Surface values with rows indexed by `s` and columns by `t`.
    pub fn on_grid(&self, s: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
        let (m, k) = self.coef.shape();
        let bx = self.x.basis().eval_points(s).map_err(FpcaError::from)?;
        let by = self.y.basis().eval_points(t).map_err(FpcaError::from)?;
        let fx = bx * self.x.eigen_coefs().rows(0, m).transpose();
        let fy = by * self.y.eigen_coefs().rows(0, k).transpose();
        Ok(fx * self.coef * fy.transpose())
    }
}
