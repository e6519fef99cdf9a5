//! Synthetic predictor/response curves with controlled contamination.
//!
//! Predictors are `x_i = μ_X + Σ_m z_im φ^X_m` with independent Gaussian
//! scores. Clean responses are `y_i = μ_Y + z_i B φ^Y + q_i φ^Y + d_i`.
//! Scenario 1 replaces `B` by `B + R` for the outlying samples; Scenario 2
//! adds `(z_i l) p(t)` where `p` is a narrow cubic B-spline bump.

pub mod benchmark;

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{CurveError, CurveSet, TimeGrid};
use crate::rng::{self, StreamRng};

pub use benchmark::{run_benchmark, summarize, BenchmarkConfig, BenchmarkRow, SummaryRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("contamination fraction {0} is outside [0, 0.5)")]
    BadFraction(f64),
    #[error("at least two samples and two grid points are needed")]
    TooSmall,
    #[error("unknown scenario {0}")]
    UnknownScenario(u8),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("{0}")]
    Pipeline(String),
}

type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Outliers follow a perturbed regression matrix.
    Shift,
    /// Outliers carry an additional localized bump.
    Bump,
}

impl Scenario {
    pub fn number(self) -> u8 {
        match self {
            Scenario::Shift => 1,
            Scenario::Bump => 2,
        }
    }
}

impl TryFrom<u8> for Scenario {
    type Error = SimError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::Shift),
            2 => Ok(Scenario::Bump),
            other => Err(SimError::UnknownScenario(other)),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    /// Number of equally spaced observation points on `[0, 1]`.
    pub t: usize,
    /// Fraction of outlying samples.
    pub a: f64,
    pub seed: u64,
    pub score_sds: [f64; 3],
    /// Standard deviation of the entries of `q_i` and of `d_i`.
    pub noise_sd: f64,
    pub b_range: (f64, f64),
    /// Standard deviation of the entries of `R`.
    pub r_sd: f64,
    /// Support length of the bump.
    pub spike_len: f64,
    pub l_mean: f64,
    pub l_sd: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Shift,
            n: 400,
            t: 500,
            a: 0.0,
            seed: 0,
            score_sds: [40f64.sqrt(), 10f64.sqrt(), 1.0],
            noise_sd: 0.1,
            b_range: (-3.0, 3.0),
            r_sd: 0.5,
            spike_len: 0.1,
            l_mean: 2.0,
            l_sd: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.a) {
            return Err(SimError::BadFraction(self.a));
        }
        if self.n < 2 || self.t < 2 {
            return Err(SimError::TooSmall);
        }
        Ok(())
    }

    /// `round(a n)`, halves rounded up.
    pub fn num_outliers(&self) -> usize {
        (self.a * self.n as f64 + 0.5).floor() as usize
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::uniform(0.0, 1.0, self.t)?)
    }
}

pub fn mu_x(t: f64) -> f64 {
    -10.0 * (t - 0.5).powi(2) + 2.0
}

pub fn mu_y(t: f64) -> f64 {
    60.0 * (-(t - 1.0).powi(2)).exp()
}

pub fn phi_x(t: f64) -> [f64; 3] {
    [SQRT_2 * (PI * t).sin(), SQRT_2 * (7.0 * PI * t).sin(), SQRT_2 * (7.0 * PI * t).cos()]
}

pub fn phi_y(t: f64) -> [f64; 3] {
    [SQRT_2 * (12.0 * PI * t).sin(), SQRT_2 * (5.0 * PI * t).sin(), SQRT_2 * (2.0 * PI * t).cos()]
}

/// `T × 3` matrix of a basis evaluated on the grid.
pub fn basis_on(grid: &TimeGrid, f: fn(f64) -> [f64; 3]) -> DMatrix<f64> {
    let pts = grid.points();
    DMatrix::from_fn(pts.len(), 3, |j, k| f(pts[j])[k])
}

fn curve_on(grid: &TimeGrid, f: fn(f64) -> f64) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.points().iter().map(|&t| f(t)))
}

/// Cardinal cubic B-spline on `[0, 4]`.
fn cardinal_cubic(u: f64) -> f64 {
    match u {
        u if !(0.0..4.0).contains(&u) => 0.0,
        u if u < 1.0 => u.powi(3) / 6.0,
        u if u < 2.0 => (-3.0 * u.powi(3) + 12.0 * u * u - 12.0 * u + 4.0) / 6.0,
        u if u < 3.0 => (3.0 * u.powi(3) - 24.0 * u * u + 60.0 * u - 44.0) / 6.0,
        u => (4.0 - u).powi(3) / 6.0,
    }
}

/// Unit-norm cubic B-spline with uniform knots on `[start, start + len]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub start: f64,
    pub len: f64,
}

impl Bump {
    /// `∫ B(u)² du` over the support of the cardinal cubic B-spline.
    const CARDINAL_SQ_INTEGRAL: f64 = 151.0 / 315.0;

    pub fn eval(&self, t: f64) -> f64 {
        let h = self.len / 4.0;
        cardinal_cubic((t - self.start) / h) / (h * Self::CARDINAL_SQ_INTEGRAL).sqrt()
    }

    pub fn on(&self, grid: &TimeGrid) -> DVector<f64> {
        DVector::from_iterator(grid.len(), grid.points().iter().map(|&t| self.eval(t)))
    }
}

/// How outlying samples were generated.
#[derive(Debug, Clone, PartialEq)]
pub enum Contamination {
    None,
    Shift { r: DMatrix<f64> },
    Bump { bump: Bump, l: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub config: ScenarioConfig,
    pub x: CurveSet,
    pub y: CurveSet,
    pub outlier_flags: Vec<bool>,
    /// Predictor scores `z` (`n × 3`).
    pub scores: DMatrix<f64>,
    /// True regression matrix for regular samples.
    pub true_b: DMatrix<f64>,
    /// Noise curves `ε_i` on the grid.
    pub noise: DMatrix<f64>,
    pub contamination: Contamination,
}

impl SimulatedDataset {
    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    /// `β(s, t) = φ^X(s)ᵀ B φ^Y(t)`.
    pub fn true_beta(&self, s: f64, t: f64) -> f64 {
        let px = phi_x(s);
        let py = phi_y(t);
        (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| px[a] * self.true_b[(a, b)] * py[b]).sum()
    }

    /// `μ_Y + z_i B φ^Y` for every sample: the noiseless response of the
    /// regular model.
    pub fn true_regression(&self) -> Result<CurveSet> {
        let grid = self.grid();
        let mut y = &self.scores * &self.true_b * basis_on(grid, phi_y).transpose();
        let mu = curve_on(grid, mu_y);
        for mut row in y.row_iter_mut() {
            row += mu.transpose();
        }
        Ok(self.y.with_samples(y)?)
    }

    pub fn num_outliers(&self) -> usize {
        self.outlier_flags.iter().filter(|&&f| f).count()
    }
}

/// Predictor curves and their scores.
pub fn gen_predictors(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Result<(CurveSet, DMatrix<f64>)> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let z = DMatrix::from_fn(cfg.n, 3, |_, m| cfg.score_sds[m] * rng.sample::<f64, _>(StandardNormal));
    let mut x = &z * basis_on(&grid, phi_x).transpose();
    let mu = curve_on(&grid, mu_x);
    for mut row in x.row_iter_mut() {
        row += mu.transpose();
    }
    Ok((CurveSet::with_default_ids(grid, x)?, z))
}

/// Clean responses for predictor scores `z`; returns the curves, the
/// regression matrix and the noise curves.
pub fn gen_responses(
    z: &DMatrix<f64>,
    cfg: &ScenarioConfig,
    rng: &mut StreamRng,
) -> Result<(CurveSet, DMatrix<f64>, DMatrix<f64>)> {
    let grid = cfg.grid()?;
    let n = z.nrows();
    let (lo, hi) = cfg.b_range;
    let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(lo..=hi));
    let q = DMatrix::from_fn(n, 3, |_, _| cfg.noise_sd * rng.sample::<f64, _>(StandardNormal));
    let d: Vec<f64> = (0..n).map(|_| cfg.noise_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let phi = basis_on(&grid, phi_y);
    let mut noise = &q * phi.transpose();
    for (i, mut row) in noise.row_iter_mut().enumerate() {
        row.add_scalar_mut(d[i]);
    }
    let mut y = z * &b * phi.transpose() + &noise;
    let mu = curve_on(&grid, mu_y);
    for mut row in y.row_iter_mut() {
        row += mu.transpose();
    }
    Ok((CurveSet::with_default_ids(grid, y)?, b, noise))
}

fn pick_outliers(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx = sample(rng, cfg.n, cfg.num_outliers()).into_vec();
    idx.sort_unstable();
    idx
}

fn regenerate(data: &mut SimulatedDataset, rows: &[usize], extra: &DMatrix<f64>) -> Result<()> {
    let mut y = data.y.samples().clone();
    for &i in rows {
        let row = y.row(i) + extra.row(i);
        y.row_mut(i).copy_from(&row);
        data.outlier_flags[i] = true;
    }
    data.y = data.y.with_samples(y)?;
    Ok(())
}

/// Regenerate `round(a n)` random samples with `B + R`.
pub fn contaminate_scenario1(
    mut data: SimulatedDataset,
    cfg: &ScenarioConfig,
    rng: &mut StreamRng,
) -> Result<SimulatedDataset> {
    if cfg.num_outliers() == 0 {
        return Ok(data);
    }
    let normal = Normal::new(0.0, cfg.r_sd).expect("finite sd");
    let r = DMatrix::from_fn(3, 3, |_, _| normal.sample(rng));
    let rows = pick_outliers(cfg, rng);
    let extra = &data.scores * &r * basis_on(data.grid(), phi_y).transpose();
    regenerate(&mut data, &rows, &extra)?;
    data.contamination = Contamination::Shift { r };
    Ok(data)
}

/// Regenerate `round(a n)` random samples with the extra column `l` of
/// the regression matrix acting on a random bump.
pub fn contaminate_scenario2(
    mut data: SimulatedDataset,
    cfg: &ScenarioConfig,
    rng: &mut StreamRng,
) -> Result<SimulatedDataset> {
    if cfg.num_outliers() == 0 {
        return Ok(data);
    }
    let start = rng.random_range(0.0..=(1.0 - cfg.spike_len));
    let bump = Bump { start, len: cfg.spike_len };
    let normal = Normal::new(cfg.l_mean, cfg.l_sd).expect("finite sd");
    let l = DVector::from_fn(3, |_, _| normal.sample(rng));
    let rows = pick_outliers(cfg, rng);
    let extra = (&data.scores * &l) * bump.on(data.grid()).transpose();
    regenerate(&mut data, &rows, &extra)?;
    data.contamination = Contamination::Bump { bump, l };
    Ok(data)
}

/// Full dataset for `cfg`, drawn from a single stream keyed by `cfg.seed`.
pub fn simulate(cfg: &ScenarioConfig) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "scenario", 0);
    let (x, scores) = gen_predictors(cfg, &mut rng)?;
    let (y, true_b, noise) = gen_responses(&scores, cfg, &mut rng)?;
    let data = SimulatedDataset {
        config: cfg.clone(),
        outlier_flags: vec![false; cfg.n],
        x,
        y,
        scores,
        true_b,
        noise,
        contamination: Contamination::None,
    };
    match cfg.scenario {
        Scenario::Shift => contaminate_scenario1(data, cfg, &mut rng),
        Scenario::Bump => contaminate_scenario2(data, cfg, &mut rng),
    }
}

/// Mean integrated squared error over the samples not flagged as outliers.
pub fn fitting_error(y: &CurveSet, yhat: &CurveSet, flags: &[bool]) -> Result<f64> {
    if y.len() != yhat.len() || y.len() != flags.len() {
        return Err(CurveError::DimensionMismatch { expected: y.len(), found: yhat.len().min(flags.len()) }.into());
    }
    if y.grid().len() != yhat.grid().len() {
        return Err(CurveError::DimensionMismatch { expected: y.grid().len(), found: yhat.grid().len() }.into());
    }
    let diff = y.samples() - yhat.samples();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in diff.row_iter().enumerate() {
        if !flags[i] {
            let values: Vec<f64> = row.iter().copied().collect();
            total += y.grid().integrate_squared(&values);
            count += 1;
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}
