//! Time grids, B-spline representation of curves and L² geometry.
//!
//! Curves are observed on a shared, equally spaced [`TimeGrid`] and stored
//! row-wise in a [`CurveSet`]. They are represented by coefficients in a
//! clamped [`BSplineBasis`]; the exact Gram matrix of that basis
//! ([`GramFactor`]) turns coefficient vectors into an orthonormal coordinate
//! system in which the L² inner product is the Euclidean dot product.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("time grid needs at least 2 points, got {0}")]
    GridTooShort(usize),
    #[error("time grid is not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("time grid is not equally spaced (step {index} differs from the mean step)")]
    NotEquallySpaced { index: usize },
    #[error("non-finite value in sample {row} at point {col}")]
    NonFinite { row: usize, col: usize },
    #[error("curve set is empty")]
    Empty,
    #[error("expected {expected} values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{num_basis} basis functions cannot carry a degree {degree} spline (need at least {})", degree + 1)]
    TooFewBasis { num_basis: usize, degree: usize },
    #[error("invalid domain [{0}, {1}]")]
    BadDomain(f64, f64),
    #[error("point {0} lies outside the basis domain")]
    OutOfDomain(f64),
    #[error("{points} grid points cannot determine {num_basis} spline coefficients")]
    Underdetermined { points: usize, num_basis: usize },
    #[error("collocation matrix is numerically rank deficient")]
    SingularDesign,
    #[error("Gram matrix is not positive definite")]
    GramNotPositiveDefinite,
    #[error("spatial median did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
}

type Result<T> = std::result::Result<T, CurveError>;

/// Strictly increasing, equally spaced observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub const SPACING_TOLERANCE: f64 = 1e-9;

    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(CurveError::GridTooShort(points.len()));
        }
        for (i, t) in points.iter().enumerate() {
            if !t.is_finite() {
                return Err(CurveError::NonFinite { row: 0, col: i });
            }
        }
        for i in 1..points.len() {
            if points[i] <= points[i - 1] {
                return Err(CurveError::NotIncreasing(i));
            }
        }
        let step = (points[points.len() - 1] - points[0]) / (points.len() - 1) as f64;
        for i in 1..points.len() {
            let d = points[i] - points[i - 1];
            if (d - step).abs() > Self::SPACING_TOLERANCE * step.max(points[i].abs()) {
                return Err(CurveError::NotEquallySpaced { index: i });
            }
        }
        Ok(Self { points })
    }

    /// `len` equally spaced points from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(CurveError::GridTooShort(len));
        }
        if !(start < end) {
            return Err(CurveError::BadDomain(start, end));
        }
        let step = (end - start) / (len - 1) as f64;
        let mut points: Vec<f64> = (0..len).map(|i| start + step * i as f64).collect();
        points[len - 1] = end;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Trapezoid-rule quadrature weights on the grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let t = &self.points;
        let n = t.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = 0.5 * (t[i + 1] - t[i]);
            w[i] += h;
            w[i + 1] += h;
        }
        w
    }

    /// Trapezoid approximation of `∫ f(t)² dt` from grid values.
    pub fn integrate_squared(&self, values: &[f64]) -> f64 {
        self.trapezoid_weights()
            .iter()
            .zip(values)
            .map(|(w, v)| w * v * v)
            .sum()
    }
}

/// A single discretely observed curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    values: Vec<f64>,
}

impl Curve {
    pub fn new(values: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CurveError::DimensionMismatch { expected: grid.len(), found: values.len() });
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(CurveError::NonFinite { row: 0, col });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `n` curves sampled on a common grid, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    grid: TimeGrid,
    samples: DMatrix<f64>,
    ids: Vec<String>,
}

impl CurveSet {
    pub fn new(grid: TimeGrid, samples: DMatrix<f64>, ids: Vec<String>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(CurveError::Empty);
        }
        if samples.ncols() != grid.len() {
            return Err(CurveError::DimensionMismatch { expected: grid.len(), found: samples.ncols() });
        }
        if ids.len() != samples.nrows() {
            return Err(CurveError::DimensionMismatch { expected: samples.nrows(), found: ids.len() });
        }
        for row in 0..samples.nrows() {
            for col in 0..samples.ncols() {
                if !samples[(row, col)].is_finite() {
                    return Err(CurveError::NonFinite { row, col });
                }
            }
        }
        Ok(Self { grid, samples, ids })
    }

    /// Curve set with ids `"0"`, `"1"`, ...
    pub fn with_default_ids(grid: TimeGrid, samples: DMatrix<f64>) -> Result<Self> {
        let ids = (0..samples.nrows()).map(|i| i.to_string()).collect();
        Self::new(grid, samples, ids)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn curve(&self, i: usize) -> Curve {
        Curve { values: self.samples.row(i).iter().copied().collect() }
    }

    /// Same grid and ids, different values.
    pub fn with_samples(&self, samples: DMatrix<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), samples, self.ids.clone())
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let samples = self.samples.select_rows(rows);
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        Self { grid: self.grid.clone(), samples, ids }
    }
}

/// Clamped B-spline basis with uniformly spaced interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    num_basis: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(domain: (f64, f64), num_basis: usize, degree: usize) -> Result<Self> {
        let (t0, t1) = domain;
        if !(t0.is_finite() && t1.is_finite()) || t0 >= t1 {
            return Err(CurveError::BadDomain(t0, t1));
        }
        if num_basis < degree + 1 {
            return Err(CurveError::TooFewBasis { num_basis, degree });
        }
        let interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat_n(t0, degree + 1));
        for j in 1..=interior {
            knots.push(t0 + (t1 - t0) * j as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(t1, degree + 1));
        Ok(Self { degree, num_basis, knots })
    }

    /// Rebuild a basis from a stored knot vector.
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) {
            return Err(CurveError::TooFewBasis {
                num_basis: knots.len().saturating_sub(degree + 1),
                degree,
            });
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(CurveError::NotIncreasing(0));
        }
        let num_basis = knots.len() - degree - 1;
        let (t0, t1) = (knots[0], knots[knots.len() - 1]);
        let clamped = knots[..=degree].iter().all(|&k| k == t0)
            && knots[knots.len() - degree - 1..].iter().all(|&k| k == t1);
        if !clamped || t0 >= t1 {
            return Err(CurveError::BadDomain(t0, t1));
        }
        Ok(Self { degree, num_basis, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_interior_knots(&self) -> usize {
        self.num_basis - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    fn contains(&self, t: f64) -> bool {
        let (a, b) = self.domain();
        let slack = 1e-12 * (b - a);
        t >= a - slack && t <= b + slack
    }

    /// Index `mu` of the knot span holding `t`, with `knots[mu] <= t < knots[mu+1]`
    /// (the last span is closed on the right).
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis;
        if t >= self.knots[n] {
            return n - 1;
        }
        if t <= self.knots[p] {
            return p;
        }
        // upper_bound over knots[p..=n]
        let slice = &self.knots[p..=n];
        let idx = slice.partition_point(|&k| k <= t);
        p + idx - 1
    }

    /// The `degree + 1` non-zero basis values at `t` and the index of the
    /// first of them.
    pub fn nonzero_at(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let (a, b) = self.domain();
        let t = t.clamp(a, b);
        let mu = self.span(t);
        let k = &self.knots;
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - k[mu + 1 - j];
            right[j] = k[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { vals[r] / denom };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        (mu - p, vals)
    }

    /// All basis values at `t`.
    pub fn eval_point(&self, t: f64) -> Result<Vec<f64>> {
        if !self.contains(t) {
            return Err(CurveError::OutOfDomain(t));
        }
        let mut row = vec![0.0; self.num_basis];
        let (first, vals) = self.nonzero_at(t);
        row[first..first + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }

    /// Collocation matrix: entry `(i, j)` is `φ_j(t_i)`.
    pub fn eval_points(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(points.len(), self.num_basis);
        for (i, &t) in points.iter().enumerate() {
            if !self.contains(t) {
                return Err(CurveError::OutOfDomain(t));
            }
            let (first, vals) = self.nonzero_at(t);
            for (j, v) in vals.into_iter().enumerate() {
                m[(i, first + j)] = v;
            }
        }
        Ok(m)
    }

    pub fn eval_basis(&self, grid: &TimeGrid) -> Result<DMatrix<f64>> {
        self.eval_points(grid.points())
    }

    /// Value of the spline with coefficient vector `coefs` at `t`.
    pub fn eval_spline(&self, coefs: &[f64], t: f64) -> f64 {
        let (first, vals) = self.nonzero_at(t);
        vals.iter().enumerate().map(|(j, v)| v * coefs[first + j]).sum()
    }

    /// Exact Gram matrix `∫ φ_j φ_k dt` by per-span Gauss–Legendre
    /// quadrature with `degree + 1` nodes.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let p = self.degree;
        let (nodes, weights) = gauss_legendre(p + 1);
        let mut g = DMatrix::zeros(self.num_basis, self.num_basis);
        for mu in p..self.num_basis {
            let (a, b) = (self.knots[mu], self.knots[mu + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in nodes.iter().zip(&weights) {
                let t = mid + half * x;
                let (first, vals) = self.nonzero_at(t);
                for (r, vr) in vals.iter().enumerate() {
                    for (c, vc) in vals.iter().enumerate() {
                        g[(first + r, first + c)] += w * half * (vr * vc);
                    }
                }
            }
        }
        g
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // P_n(x) and its derivative by the three-term recurrence
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n == 1 {
        nodes[0] = 0.0;
        weights[0] = 2.0;
    }
    (nodes, weights)
}

/// Spline coefficients of `n` curves.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    basis: BSplineBasis,
    coefs: DMatrix<f64>,
    residual_rms: f64,
}

impl BasisExpansion {
    pub fn new(basis: BSplineBasis, coefs: DMatrix<f64>) -> Result<Self> {
        if coefs.ncols() != basis.num_basis() {
            return Err(CurveError::DimensionMismatch { expected: basis.num_basis(), found: coefs.ncols() });
        }
        for row in 0..coefs.nrows() {
            for col in 0..coefs.ncols() {
                if !coefs[(row, col)].is_finite() {
                    return Err(CurveError::NonFinite { row, col });
                }
            }
        }
        Ok(Self { basis, coefs, residual_rms: 0.0 })
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn coefs(&self) -> &DMatrix<f64> {
        &self.coefs
    }

    pub fn len(&self) -> usize {
        self.coefs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coefs.nrows() == 0
    }

    /// Root mean square of the least-squares fit residuals (0 when the
    /// expansion was not produced by [`fit_expansion`]).
    pub fn residual_rms(&self) -> f64 {
        self.residual_rms
    }

    /// Curve values on `grid`, one row per sample.
    pub fn evaluate(&self, grid: &TimeGrid) -> Result<DMatrix<f64>> {
        let phi = self.basis.eval_basis(grid)?;
        Ok(&self.coefs * phi.transpose())
    }

    pub fn to_curves(&self, grid: &TimeGrid, ids: Vec<String>) -> Result<CurveSet> {
        CurveSet::new(grid.clone(), self.evaluate(grid)?, ids)
    }
}

/// Least-squares spline fit of every curve, solved by QR of the
/// collocation matrix.
pub fn fit_expansion(curves: &CurveSet, basis: &BSplineBasis) -> Result<BasisExpansion> {
    let t = curves.grid().len();
    let p = basis.num_basis();
    if t < p {
        return Err(CurveError::Underdetermined { points: t, num_basis: p });
    }
    let phi = basis.eval_basis(curves.grid())?;
    let qr = phi.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return Err(CurveError::SingularDesign);
    }
    let q = qr.q();
    // coefsᵀ = R⁻¹ Qᵀ Yᵀ
    let rhs = q.transpose() * curves.samples().transpose();
    let sol = r.solve_upper_triangular(&rhs).ok_or(CurveError::SingularDesign)?;
    let coefs = sol.transpose();
    let fitted = &coefs * phi.transpose();
    let resid = curves.samples() - fitted;
    let residual_rms = (resid.norm_squared() / resid.len() as f64).sqrt();
    let mut exp = BasisExpansion::new(basis.clone(), coefs)?;
    exp.residual_rms = residual_rms;
    Ok(exp)
}

/// Gram matrix of a basis with its Cholesky factor `G = RᵀR`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactor {
    gram: DMatrix<f64>,
    chol_upper: DMatrix<f64>,
}

impl GramFactor {
    pub fn new(basis: &BSplineBasis) -> Result<Self> {
        let gram = basis.gram_matrix();
        Self::from_gram(gram)
    }

    pub fn from_gram(gram: DMatrix<f64>) -> Result<Self> {
        let chol = gram.clone().cholesky().ok_or(CurveError::GramNotPositiveDefinite)?;
        let chol_upper = chol.l().transpose();
        Ok(Self { gram, chol_upper })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Upper-triangular `R` with `G = RᵀR`.
    pub fn chol_upper(&self) -> &DMatrix<f64> {
        &self.chol_upper
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// Orthonormal coordinates `R·c` of each coefficient row.
    pub fn to_orthonormal(&self, coefs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if coefs.ncols() != self.dim() {
            return Err(CurveError::DimensionMismatch { expected: self.dim(), found: coefs.ncols() });
        }
        Ok(coefs * self.chol_upper.transpose())
    }

    pub fn from_orthonormal(&self, coords: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if coords.ncols() != self.dim() {
            return Err(CurveError::DimensionMismatch { expected: self.dim(), found: coords.ncols() });
        }
        let t = self
            .chol_upper
            .solve_upper_triangular(&coords.transpose())
            .ok_or(CurveError::GramNotPositiveDefinite)?;
        Ok(t.transpose())
    }

    pub fn vector_to_orthonormal(&self, coefs: &DVector<f64>) -> DVector<f64> {
        &self.chol_upper * coefs
    }

    pub fn vector_from_orthonormal(&self, coords: &DVector<f64>) -> DVector<f64> {
        self.chol_upper
            .solve_upper_triangular(coords)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// `⟨f, g⟩ = aᵀ G b` for spline coefficient vectors `a` and `b`.
pub fn inner_product(a: &[f64], b: &[f64], gf: &GramFactor) -> Result<f64> {
    let p = gf.dim();
    if a.len() != p || b.len() != p {
        return Err(CurveError::DimensionMismatch { expected: p, found: a.len().min(b.len()) });
    }
    let g = gf.gram();
    let mut acc = 0.0;
    for j in 0..p {
        let mut row = 0.0;
        for k in 0..p {
            row += g[(j, k)] * b[k];
        }
        acc += a[j] * row;
    }
    Ok(acc)
}

pub fn to_orthonormal_coords(exp: &BasisExpansion, gf: &GramFactor) -> Result<DMatrix<f64>> {
    gf.to_orthonormal(exp.coefs())
}

pub fn from_orthonormal_coords(
    coords: &DMatrix<f64>,
    basis: &BSplineBasis,
    gf: &GramFactor,
) -> Result<BasisExpansion> {
    BasisExpansion::new(basis.clone(), gf.from_orthonormal(coords)?)
}

/// A location estimate together with the expansion centred on it.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredExpansion {
    pub center: DVector<f64>,
    pub centered: BasisExpansion,
}

fn subtract_center(exp: &BasisExpansion, center: &DVector<f64>) -> BasisExpansion {
    let mut coefs = exp.coefs().clone();
    for mut row in coefs.row_iter_mut() {
        row -= center.transpose();
    }
    BasisExpansion { basis: exp.basis.clone(), coefs, residual_rms: exp.residual_rms }
}

/// Column mean of the coefficients.
pub fn center_classical(exp: &BasisExpansion) -> CenteredExpansion {
    let center = exp.coefs().row_mean().transpose();
    let centered = subtract_center(exp, &center);
    CenteredExpansion { center, centered }
}

/// Spatial median of the coefficient rows; falls back to the
/// coordinatewise median if Weiszfeld fails to converge.
pub fn center_robust(exp: &BasisExpansion) -> CenteredExpansion {
    let center = robust_location(exp.coefs());
    let centered = subtract_center(exp, &center);
    CenteredExpansion { center, centered }
}

/// Spatial median computed in orthonormal coordinates, i.e. the L²
/// geometric median of the curves.
pub fn center_robust_l2(exp: &BasisExpansion, gf: &GramFactor) -> Result<CenteredExpansion> {
    let coords = gf.to_orthonormal(exp.coefs())?;
    let center_coords = robust_location(&coords);
    let center = gf.vector_from_orthonormal(&center_coords);
    let centered = subtract_center(exp, &center);
    Ok(CenteredExpansion { center, centered })
}

fn robust_location(rows: &DMatrix<f64>) -> DVector<f64> {
    match spatial_median(rows, SPATIAL_MEDIAN_TOL, SPATIAL_MEDIAN_MAX_ITER) {
        Ok(m) => m,
        Err(err) => {
            log::warn!("{err}; using the coordinatewise median");
            coordinatewise_median(rows)
        }
    }
}

pub const SPATIAL_MEDIAN_TOL: f64 = 1e-9;
pub const SPATIAL_MEDIAN_MAX_ITER: usize = 500;

pub fn coordinatewise_median(rows: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        rows.ncols(),
        rows.column_iter().map(|c| stats::median(c.as_slice())),
    )
}

/// Geometric median of the rows by Weiszfeld iteration with the
/// Vardi–Zhang correction for iterates that land on a data point.
/// One-dimensional data return the ordinary median.
pub fn spatial_median(rows: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let n = rows.nrows();
    let p = rows.ncols();
    if n == 0 {
        return Err(CurveError::Empty);
    }
    if p == 1 || n <= 2 {
        return Ok(coordinatewise_median(rows));
    }
    let mut y = coordinatewise_median(rows);
    let mut dists = vec![0.0; n];
    for iter in 1..=max_iter {
        for (i, row) in rows.row_iter().enumerate() {
            dists[i] = (row.transpose() - &y).norm();
        }
        let scale = dists.iter().sum::<f64>() / n as f64;
        if scale == 0.0 {
            return Ok(y);
        }
        let coincide = 1e-14 * scale;
        let mut weight_sum = 0.0;
        let mut weighted = DVector::zeros(p);
        let mut direction = DVector::zeros(p);
        let mut eta = 0.0;
        for (i, row) in rows.row_iter().enumerate() {
            if dists[i] <= coincide {
                eta += 1.0;
                continue;
            }
            let w = 1.0 / dists[i];
            weight_sum += w;
            weighted.axpy(w, &row.transpose(), 1.0);
            direction.axpy(w, &(row.transpose() - &y), 1.0);
        }
        if weight_sum == 0.0 {
            return Ok(y);
        }
        let tilde = weighted / weight_sum;
        let next = if eta == 0.0 {
            tilde
        } else {
            let r = direction.norm();
            if r <= eta {
                // y is a data point satisfying the optimality condition
                return Ok(y);
            }
            let gamma = eta / r;
            tilde * (1.0 - gamma) + &y * gamma
        };
        let step = (&next - &y).norm();
        y = next;
        if step <= tol * scale {
            return Ok(y);
        }
        if iter == max_iter {
            break;
        }
    }
    Err(CurveError::NonConvergence { iterations: max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert_eq!(TimeGrid::new(vec![0.0]), Err(CurveError::GridTooShort(1)));
        assert_eq!(TimeGrid::new(vec![0.0, 1.0, 1.0]), Err(CurveError::NotIncreasing(2)));
        assert!(matches!(
            TimeGrid::new(vec![0.0, 0.1, 0.3]),
            Err(CurveError::NotEquallySpaced { .. })
        ));
        let g = grid(5);
        let w = g.trapezoid_weights();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 0.125);
    }

    #[test]
    fn minimal_cubic_basis() {
        let b = BSplineBasis::new((0.0, 1.0), 4, 3).unwrap();
        assert_eq!(b.num_interior_knots(), 0);
        assert_eq!(b.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let mid = b.eval_point(0.5).unwrap();
        assert_abs_diff_eq!(mid.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // Bernstein polynomials at 1/2
        for (v, e) in mid.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-15);
        }
        assert_eq!(b.eval_point(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.eval_point(1.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn basis_construction_errors() {
        assert_eq!(
            BSplineBasis::new((0.0, 1.0), 3, 3),
            Err(CurveError::TooFewBasis { num_basis: 3, degree: 3 })
        );
        assert_eq!(BSplineBasis::new((1.0, 1.0), 10, 3), Err(CurveError::BadDomain(1.0, 1.0)));
        let b = BSplineBasis::new((0.0, 1.0), 200, 3).unwrap();
        assert_eq!(b.num_interior_knots(), 196);
        let interior = &b.knots()[4..200];
        let step = 1.0 / 197.0;
        for (j, k) in interior.iter().enumerate() {
            assert_abs_diff_eq!(*k, (j + 1) as f64 * step, epsilon = 1e-14);
        }
        assert!(matches!(b.eval_point(1.5), Err(CurveError::OutOfDomain(_))));
    }

    #[test]
    fn eval_basis_rows_are_a_partition_of_unity() {
        let b = BSplineBasis::new((0.0, 2.0), 17, 3).unwrap();
        let m = b.eval_basis(&TimeGrid::uniform(0.0, 2.0, 101).unwrap()).unwrap();
        for row in m.row_iter() {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for order in 1..=6 {
            let (x, w) = gauss_legendre(order);
            for deg in 0..2 * order {
                let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert_abs_diff_eq!(approx, exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn fit_reproduces_basis_element_and_constants() {
        let b = BSplineBasis::new((0.0, 1.0), 12, 3).unwrap();
        let g = grid(60);
        let phi = b.eval_basis(&g).unwrap();
        let mut samples = DMatrix::zeros(2, 60);
        samples.row_mut(0).copy_from(&phi.column(1).transpose());
        samples.row_mut(1).fill(5.0);
        let cs = CurveSet::with_default_ids(g, samples).unwrap();
        let exp = fit_expansion(&cs, &b).unwrap();
        assert!(exp.residual_rms() <= 1e-8);
        for j in 0..12 {
            assert_abs_diff_eq!(exp.coefs()[(0, j)], if j == 1 { 1.0 } else { 0.0 }, epsilon = 1e-8);
            assert_abs_diff_eq!(exp.coefs()[(1, j)], 5.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn fit_rejects_underdetermined_systems() {
        let b = BSplineBasis::new((0.0, 1.0), 12, 3).unwrap();
        let cs = CurveSet::with_default_ids(grid(10), DMatrix::zeros(1, 10)).unwrap();
        assert_eq!(
            fit_expansion(&cs, &b),
            Err(CurveError::Underdetermined { points: 10, num_basis: 12 })
        );
    }

    #[test]
    fn sine_fit_matches_dense_least_squares() {
        let g = grid(500);
        let b = BSplineBasis::new((0.0, 1.0), 200, 3).unwrap();
        let y = DMatrix::from_fn(1, 500, |_, j| (2.0 * PI * g.points()[j]).sin());
        let exp = fit_expansion(&CurveSet::with_default_ids(g.clone(), y.clone()).unwrap(), &b)
            .unwrap();
        assert!(exp.residual_rms() <= 1e-6, "rms {}", exp.residual_rms());
        // oracle: SVD least squares on the same collocation matrix
        let phi = b.eval_basis(&g).unwrap();
        let svd = phi.svd(true, true);
        let oracle = svd.solve(&y.transpose(), 1e-14).unwrap();
        for j in 0..200 {
            assert_abs_diff_eq!(exp.coefs()[(0, j)], oracle[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn gram_factor_reconstructs_gram() {
        let b = BSplineBasis::new((0.0, 1.0), 40, 3).unwrap();
        let gf = GramFactor::new(&b).unwrap();
        let r = gf.chol_upper();
        let err = (r.transpose() * r - gf.gram()).norm() / gf.gram().norm();
        assert!(err <= 1e-10);
        assert!((gf.gram() - gf.gram().transpose()).norm() == 0.0);
        // integral of each basis function times 1 sums to the domain length
        assert_abs_diff_eq!(gf.gram().sum(), 1.0, epsilon = 1e-12);
    }

    fn fitted_coefs(f: impl Fn(f64) -> f64, b: &BSplineBasis) -> Vec<f64> {
        let g = grid(1000);
        let y = DMatrix::from_fn(1, 1000, |_, j| f(g.points()[j]));
        let exp = fit_expansion(&CurveSet::with_default_ids(g, y).unwrap(), b).unwrap();
        exp.coefs().row(0).iter().copied().collect()
    }

    #[test]
    fn inner_products_of_sine_eigenfunctions() {
        let b = BSplineBasis::new((0.0, 1.0), 200, 3).unwrap();
        let gf = GramFactor::new(&b).unwrap();
        let s1 = fitted_coefs(|t| 2f64.sqrt() * (PI * t).sin(), &b);
        let s7 = fitted_coefs(|t| 2f64.sqrt() * (7.0 * PI * t).sin(), &b);
        assert_abs_diff_eq!(inner_product(&s1, &s7, &gf).unwrap(), 0.0, epsilon = 1e-4);
        // ∫ 2 sin²(πt) dt on [0,1] by composite Simpson
        let m = 2000;
        let h = 1.0 / m as f64;
        let f = |t: f64| 2.0 * (PI * t).sin().powi(2);
        let simpson: f64 = (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * f(i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert_abs_diff_eq!(inner_product(&s1, &s1, &gf).unwrap(), simpson, epsilon = 1e-4);
        assert!(inner_product(&s1, &s1[..10], &gf).is_err());
    }

    #[test]
    fn orthonormal_coordinates_preserve_inner_products() {
        let b = BSplineBasis::new((0.0, 1.0), 15, 3).unwrap();
        let gf = GramFactor::new(&b).unwrap();
        let coefs = DMatrix::from_fn(4, 15, |i, j| ((i * 15 + j) as f64 * 0.731).sin());
        let exp = BasisExpansion::new(b.clone(), coefs.clone()).unwrap();
        let coords = to_orthonormal_coords(&exp, &gf).unwrap();
        let back = from_orthonormal_coords(&coords, &b, &gf).unwrap();
        assert!((back.coefs() - &coefs).amax() <= 1e-10);
        for i in 0..4 {
            for j in 0..4 {
                let a: Vec<f64> = coefs.row(i).iter().copied().collect();
                let c: Vec<f64> = coefs.row(j).iter().copied().collect();
                let l2 = inner_product(&a, &c, &gf).unwrap();
                let dot = coords.row(i).dot(&coords.row(j));
                assert_abs_diff_eq!(l2, dot, epsilon = 1e-10);
            }
        }
        let zero = BasisExpansion::new(b, DMatrix::zeros(2, 15)).unwrap();
        assert_eq!(to_orthonormal_coords(&zero, &gf).unwrap(), DMatrix::zeros(2, 15));
    }

    #[test]
    fn classical_centering() {
        let b = BSplineBasis::new((0.0, 1.0), 4, 3).unwrap();
        let same = BasisExpansion::new(b.clone(), DMatrix::from_element(3, 4, 2.5)).unwrap();
        let c = center_classical(&same);
        assert!(c.centered.coefs().iter().all(|&v| v == 0.0));
        let v = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 3.0, 0.5, -1.0, 2.0, -3.0, -0.5]);
        let c = center_classical(&BasisExpansion::new(b.clone(), v).unwrap());
        assert!(c.center.iter().all(|&v| v == 0.0));
        // 5x3 hand-computed means (using a 3-function basis is not possible
        // for cubic splines, so use degree 2)
        let b2 = BSplineBasis::new((0.0, 1.0), 3, 2).unwrap();
        let m = DMatrix::from_row_slice(
            5,
            3,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, -1.0, 0.0, 1.5],
        );
        let c = center_classical(&BasisExpansion::new(b2, m).unwrap());
        assert_abs_diff_eq!(c.center[0], 21.0 / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.center[1], 26.0 / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.center[2], 31.5 / 5.0, epsilon = 1e-12);
        for col in c.centered.coefs().column_iter() {
            assert_abs_diff_eq!(col.sum(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn spatial_median_of_symmetric_configuration() {
        let c = [3.0, -1.0];
        let rows = DMatrix::from_row_slice(
            4,
            2,
            &[c[0] + 1.0, c[1], c[0] - 1.0, c[1], c[0], c[1] + 2.0, c[0], c[1] - 2.0],
        );
        let m = spatial_median(&rows, 1e-12, 500).unwrap();
        assert_abs_diff_eq!(m[0], c[0], epsilon = 1e-9);
        assert_abs_diff_eq!(m[1], c[1], epsilon = 1e-9);
    }

    #[test]
    fn spatial_median_ignores_a_single_gross_outlier() {
        let base = [0.3, -1.2, 4.0];
        let mut rows = DMatrix::from_fn(10, 3, |_, j| base[j]);
        rows.row_mut(9).copy_from_slice(&[1e4, -3e3, 2e4]);
        let m = spatial_median(&rows, 1e-9, 500).unwrap();
        // oracle: the sum of distances is minimised over a fine grid around
        // the repeated row; the repeated row itself is the minimiser.
        let cost = |y: &[f64]| -> f64 {
            rows.row_iter()
                .map(|r| r.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .sum()
        };
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in -5..=5 {
            for j in -5..=5 {
                for k in -5..=5 {
                    let y = [
                        base[0] + 0.01 * i as f64,
                        base[1] + 0.01 * j as f64,
                        base[2] + 0.01 * k as f64,
                    ];
                    let c = cost(&y);
                    if c < best.0 {
                        best = (c, y);
                    }
                }
            }
        }
        for j in 0..3 {
            assert_abs_diff_eq!(best.1[j], base[j], epsilon = 1e-12);
            assert_abs_diff_eq!(m[j], base[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn spatial_median_in_one_dimension_is_the_median() {
        let rows = DMatrix::from_column_slice(5, 1, &[4.0, -1.0, 100.0, 2.0, 3.0]);
        assert_eq!(spatial_median(&rows, 1e-9, 500).unwrap()[0], 3.0);
        let rows = DMatrix::from_column_slice(4, 1, &[4.0, -1.0, 100.0, 2.0]);
        assert_eq!(spatial_median(&rows, 1e-9, 500).unwrap()[0], 3.0);
    }

    #[test]
    fn spatial_median_reports_non_convergence() {
        let rows = DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) as f64).sin() * (1 + i) as f64);
        assert_eq!(
            spatial_median(&rows, 0.0, 3),
            Err(CurveError::NonConvergence { iterations: 3 })
        );
        let b = BSplineBasis::new((0.0, 1.0), 4, 3).unwrap();
        // center_robust falls back instead of failing
        let c = center_robust(&BasisExpansion::new(b, rows).unwrap());
        assert!(c.center.iter().all(|v| v.is_finite()));
    }
}
