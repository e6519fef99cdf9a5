//! Shared inputs for the pipeline benchmarks.

use nalgebra::DMatrix;
use rfflr::curve::{center_classical, fit_expansion};
use rfflr::fpca::{fit_classical_fpca, project_scores};
use rfflr::simgen::simulate;
use rfflr::{BSplineBasis, BasisExpansion, GramFactor, Scenario, ScenarioConfig, SimulatedDataset};

pub const NUM_BASIS: usize = 80;

/// A contaminated Scenario-1 dataset together with its spline expansions
/// and leading score matrices.
pub struct Fixture {
    pub data: SimulatedDataset,
    pub basis: BSplineBasis,
    pub gram: GramFactor,
    pub x_expansion: BasisExpansion,
    pub y_expansion: BasisExpansion,
    /// Predictor scores `n × 3`.
    pub z: DMatrix<f64>,
    /// Response scores `n × 3`.
    pub w: DMatrix<f64>,
}

pub fn fixture(n: usize, t: usize, a: f64, seed: u64) -> Fixture {
    let cfg = ScenarioConfig { scenario: Scenario::Shift, n, t, a, seed, ..Default::default() };
    let data = simulate(&cfg).expect("valid scenario");
    let basis = BSplineBasis::new((0.0, 1.0), NUM_BASIS, 3).expect("valid basis");
    let gram = GramFactor::new(&basis).expect("gram factor");
    let x_expansion = fit_expansion(&data.x, &basis).expect("x expansion");
    let y_expansion = fit_expansion(&data.y, &basis).expect("y expansion");
    let scores = |exp: &BasisExpansion| {
        let model = fit_classical_fpca(&center_classical(exp), &gram, 3).expect("fpca");
        project_scores(&model, exp, 3).expect("scores")
    };
    let z = scores(&x_expansion);
    let w = scores(&y_expansion);
    Fixture { data, basis, gram, x_expansion, y_expansion, z, w }
}
