//! Functional principal component analysis on spline coefficients.
//!
//! Both estimators work in orthonormal coordinates (see [`GramFactor`]), so
//! the Euclidean geometry of the coordinates is the L² geometry of the
//! curves. The classical estimator diagonalises the sample covariance; the
//! robust one is a projection-pursuit estimator that searches, among the
//! directions spanned by the centred observations, for the direction with
//! the largest robust scale of projections, and then deflates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::curve::{BSplineBasis, BasisExpansion, CenteredExpansion, CurveError, GramFactor, TimeGrid};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("cannot extract {requested} components (at most {max} for this sample)")]
    InvalidComponents { requested: usize, max: usize },
    #[error("requested {requested} components but the model holds {available}")]
    TooManyComponents { requested: usize, available: usize },
    #[error("no usable data: every candidate direction vanishes")]
    DegenerateData,
    #[error(transparent)]
    Curve(#[from] CurveError),
}

type Result<T> = std::result::Result<T, FpcaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpcaMethod {
    Classical,
    Robust,
}

impl FpcaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FpcaMethod::Classical => "classical",
            FpcaMethod::Robust => "robust",
        }
    }
}

impl std::str::FromStr for FpcaMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classical" | "classic" => Ok(FpcaMethod::Classical),
            "robust" => Ok(FpcaMethod::Robust),
            other => Err(format!("unknown method `{other}` (expected classical or robust)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleEstimator {
    /// Median absolute deviation times 1.4826.
    Mad,
    /// Rousseeuw–Croux Qn.
    Qn,
}

impl ScaleEstimator {
    pub fn scale(self, values: &mut [f64]) -> f64 {
        match self {
            ScaleEstimator::Mad => stats::mad_in_place(values),
            ScaleEstimator::Qn => stats::qn(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustPpConfig {
    pub scale: ScaleEstimator,
    /// Local improvement rounds applied to the best candidate direction.
    pub refine_sweeps: usize,
}

impl Default for RobustPpConfig {
    fn default() -> Self {
        Self { scale: ScaleEstimator::Mad, refine_sweeps: 2 }
    }
}

/// Mean function, eigenfunctions and eigenvalues of a curve sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FpcaModel {
    basis: BSplineBasis,
    gram: GramFactor,
    mean_coefs: DVector<f64>,
    eigen_coefs: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    total_variance: f64,
    method: FpcaMethod,
}

impl FpcaModel {
    /// Assemble a model from stored parts. The Gram factor is recomputed
    /// from the basis.
    pub fn from_parts(
        basis: BSplineBasis,
        mean_coefs: DVector<f64>,
        eigen_coefs: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        total_variance: f64,
        method: FpcaMethod,
    ) -> Result<Self> {
        let p = basis.num_basis();
        if mean_coefs.len() != p || eigen_coefs.ncols() != p {
            return Err(CurveError::DimensionMismatch { expected: p, found: eigen_coefs.ncols() }.into());
        }
        if eigenvalues.len() != eigen_coefs.nrows() {
            return Err(CurveError::DimensionMismatch {
                expected: eigen_coefs.nrows(),
                found: eigenvalues.len(),
            }
            .into());
        }
        let gram = GramFactor::new(&basis)?;
        Ok(Self { basis, gram, mean_coefs, eigen_coefs, eigenvalues, total_variance, method })
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn gram(&self) -> &GramFactor {
        &self.gram
    }

    pub fn mean_coefs(&self) -> &DVector<f64> {
        &self.mean_coefs
    }

    /// Row `k` holds the spline coefficients of eigenfunction `k`.
    pub fn eigen_coefs(&self) -> &DMatrix<f64> {
        &self.eigen_coefs
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn method(&self) -> FpcaMethod {
        self.method
    }

    pub fn num_components(&self) -> usize {
        self.eigen_coefs.nrows()
    }

    /// Values of the first `m` eigenfunctions on `grid` (`T × m`).
    pub fn eigenfunctions_on(&self, grid: &TimeGrid, m: usize) -> Result<DMatrix<f64>> {
        self.check_components(m)?;
        let phi = self.basis.eval_basis(grid)?;
        Ok(phi * self.eigen_coefs.rows(0, m).transpose())
    }

    pub fn mean_on(&self, grid: &TimeGrid) -> Result<DVector<f64>> {
        let phi = self.basis.eval_basis(grid)?;
        Ok(phi * &self.mean_coefs)
    }

    fn check_components(&self, m: usize) -> Result<()> {
        if m > self.num_components() {
            return Err(FpcaError::TooManyComponents { requested: m, available: self.num_components() });
        }
        Ok(())
    }
}

fn check_request(n: usize, p: usize, q: usize) -> Result<()> {
    let max = n.saturating_sub(1).min(p);
    if q == 0 || q > max {
        return Err(FpcaError::InvalidComponents { requested: q, max });
    }
    Ok(())
}

/// Flip each direction so that its largest-magnitude spline coefficient is
/// positive.
fn apply_sign_convention(eigen_coefs: &mut DMatrix<f64>) {
    for mut row in eigen_coefs.row_iter_mut() {
        let mut best = 0.0f64;
        for &v in row.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            row.neg_mut();
        }
    }
}

fn directions_to_coefs(directions: &DMatrix<f64>, gf: &GramFactor) -> Result<DMatrix<f64>> {
    Ok(gf.from_orthonormal(directions)?)
}

/// Classical FPCA: eigen-decomposition of the sample covariance of the
/// orthonormal coordinates of a centred expansion.
pub fn fit_classical_fpca(data: &CenteredExpansion, gf: &GramFactor, q: usize) -> Result<FpcaModel> {
    let n = data.centered.len();
    let p = gf.dim();
    check_request(n, p, q)?;
    let x = gf.to_orthonormal(data.centered.coefs())?;
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lead = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * lead && lead > 0.0).count();
    if rank < q {
        log::warn!("covariance rank {rank} is below the {q} requested components");
    }
    let mut directions = DMatrix::zeros(q, p);
    let mut eigenvalues = DVector::zeros(q);
    for (k, &i) in order.iter().take(q).enumerate() {
        directions.row_mut(k).copy_from(&eig.eigenvectors.column(i).transpose());
        eigenvalues[k] = eig.eigenvalues[i].max(0.0);
    }
    let mut eigen_coefs = directions_to_coefs(&directions, gf)?;
    apply_sign_convention(&mut eigen_coefs);
    Ok(FpcaModel {
        basis: data.centered.basis().clone(),
        gram: gf.clone(),
        mean_coefs: data.center.clone(),
        eigen_coefs,
        eigenvalues,
        total_variance,
        method: FpcaMethod::Classical,
    })
}

fn robust_scale(scale: ScaleEstimator, proj: &[f64]) -> f64 {
    let mut buf = proj.to_vec();
    scale.scale(&mut buf)
}

/// Unit vector orthogonal to every row of `basis[..k]`, chosen among the
/// coordinate axes.
fn orthogonal_completion(directions: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let p = directions.ncols();
    let mut best: Option<DVector<f64>> = None;
    let mut best_norm = 0.0;
    for j in 0..p {
        let mut v = DVector::zeros(p);
        v[j] = 1.0;
        for r in 0..k {
            let d = directions.row(r).transpose();
            let c = d.dot(&v);
            v.axpy(-c, &d, 1.0);
        }
        let nv = v.norm();
        if nv > best_norm + 1e-12 {
            best_norm = nv;
            best = Some(v / nv);
            if best_norm > 0.5 {
                break;
            }
        }
    }
    best.expect("orthogonal complement is non-empty while k < p")
}

/// Robust projection-pursuit FPCA with candidate directions taken from the
/// centred observations.
pub fn fit_robust_fpca(
    data: &CenteredExpansion,
    gf: &GramFactor,
    q: usize,
    cfg: &RobustPpConfig,
) -> Result<FpcaModel> {
    let n = data.centered.len();
    let p = gf.dim();
    if n == 0 {
        return Err(FpcaError::DegenerateData);
    }
    check_request(n, p, q)?;
    let mut resid = gf.to_orthonormal(data.centered.coefs())?;
    let initial_scale = resid.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let vanish = 1e-10 * initial_scale;

    let mut directions = DMatrix::zeros(q, p);
    let mut scales = vec![0.0; q];
    for k in 0..q {
        let norms: Vec<f64> = resid.row_iter().map(|r| r.norm()).collect();
        let candidates: Vec<usize> =
            (0..n).filter(|&i| norms[i] > vanish && norms[i] > 0.0).collect();
        if candidates.is_empty() {
            let dir = orthogonal_completion(&directions, k);
            directions.row_mut(k).copy_from(&dir.transpose());
            scales[k] = 0.0;
            continue;
        }
        let gram = &resid * resid.transpose();
        let cand_scales: Vec<f64> = candidates
            .par_iter()
            .map(|&c| {
                let proj: Vec<f64> = gram.column(c).iter().map(|v| v / norms[c]).collect();
                robust_scale(cfg.scale, &proj)
            })
            .collect();
        let mut best = 0;
        for (i, s) in cand_scales.iter().enumerate() {
            if *s > cand_scales[best] {
                best = i;
            }
        }
        let c = candidates[best];
        let mut dir: DVector<f64> = resid.row(c).transpose() / norms[c];
        let mut s = cand_scales[best];
        for _ in 0..cfg.refine_sweeps {
            match refine_direction(&resid, &dir, s, cfg.scale) {
                Some((d, s_new)) => {
                    dir = d;
                    s = s_new;
                }
                None => break,
            }
        }
        // keep exact orthogonality to the earlier components
        for r in 0..k {
            let d = directions.row(r).transpose();
            let c = d.dot(&dir);
            dir.axpy(-c, &d, 1.0);
        }
        dir /= dir.norm();
        let proj = &resid * &dir;
        resid -= &proj * dir.transpose();
        directions.row_mut(k).copy_from(&dir.transpose());
        scales[k] = s;
    }

    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| scales[b].total_cmp(&scales[a]).then(a.cmp(&b)));
    let sorted_dirs = directions.select_rows(&order);
    let eigenvalues = DVector::from_iterator(q, order.iter().map(|&k| scales[k] * scales[k]));
    let leftover: f64 = resid
        .column_iter()
        .map(|c| robust_scale(cfg.scale, c.as_slice()).powi(2))
        .sum();
    let total_variance = eigenvalues.sum() + leftover;
    let mut eigen_coefs = directions_to_coefs(&sorted_dirs, gf)?;
    apply_sign_convention(&mut eigen_coefs);
    Ok(FpcaModel {
        basis: data.centered.basis().clone(),
        gram: gf.clone(),
        mean_coefs: data.center.clone(),
        eigen_coefs,
        eigenvalues,
        total_variance,
        method: FpcaMethod::Robust,
    })
}

/// One re-weighted power step: observations whose projection lies far from
/// the bulk are down-weighted and the direction moves towards the leading
/// axis of the weighted scatter. Returns the new direction only when it
/// increases the robust scale.
fn refine_direction(
    data: &DMatrix<f64>,
    dir: &DVector<f64>,
    current: f64,
    scale: ScaleEstimator,
) -> Option<(DVector<f64>, f64)> {
    const CUTOFF: f64 = 2.5;
    if current <= 0.0 {
        return None;
    }
    let proj = data * dir;
    let med = stats::median(proj.as_slice());
    let weighted = DVector::from_iterator(
        proj.len(),
        proj.iter().map(|&u| {
            let r = (u - med).abs() / (CUTOFF * current);
            let w = if r <= 1.0 { 1.0 } else { 1.0 / (r * r) };
            w * (u - med)
        }),
    );
    let mut next = data.transpose() * weighted;
    let norm = next.norm();
    if !(norm > 0.0) {
        return None;
    }
    next /= norm;
    let s = robust_scale(scale, (data * &next).as_slice());
    (s > current).then_some((next, s))
}

/// Scores `⟨x_i − mean, φ_m⟩` for the first `m` components.
pub fn project_scores(model: &FpcaModel, exp: &BasisExpansion, m: usize) -> Result<DMatrix<f64>> {
    model.check_components(m)?;
    let p = model.basis.num_basis();
    if exp.coefs().ncols() != p {
        return Err(CurveError::DimensionMismatch { expected: p, found: exp.coefs().ncols() }.into());
    }
    let mut centered = exp.coefs().clone();
    for mut row in centered.row_iter_mut() {
        row -= model.mean_coefs.transpose();
    }
    let eig = model.eigen_coefs.rows(0, m);
    Ok(centered * model.gram.gram() * eig.transpose())
}

/// `mean + scores · eigenfunctions`, for as many components as `scores`
/// has columns.
pub fn reconstruct(model: &FpcaModel, scores: &DMatrix<f64>) -> Result<BasisExpansion> {
    let m = scores.ncols();
    model.check_components(m)?;
    let mut coefs = scores * model.eigen_coefs.rows(0, m);
    for mut row in coefs.row_iter_mut() {
        row += model.mean_coefs.transpose();
    }
    Ok(BasisExpansion::new(model.basis.clone(), coefs)?)
}

/// Smallest number of components whose eigenvalues explain at least
/// `threshold` of the total variance, capped at `cap`.
pub fn kmax_by_variance(model: &FpcaModel, threshold: f64, cap: usize) -> usize {
    let lambda = model.eigenvalues();
    let q = lambda.len();
    let total = model.total_variance.max(lambda.sum());
    let limit = cap.min(q).max(1);
    if !(total > 0.0) {
        return 1;
    }
    let mut cum = 0.0;
    for (m, l) in lambda.iter().enumerate() {
        cum += l;
        if cum / total >= threshold {
            return (m + 1).min(limit);
        }
    }
    limit
}
