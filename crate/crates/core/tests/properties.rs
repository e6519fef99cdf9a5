use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rfflr::curve::{center_classical, center_robust_l2, fit_expansion, GramFactor};
use rfflr::fpca::{fit_classical_fpca, fit_robust_fpca};
use rfflr::model_select::{fit_grid, Criterion, SelectConfig};
use rfflr::outlier::{bandwidth_percentile, h_modal_depth, pairwise_l2};
use rfflr::regression::{fit_mlts, MltsConfig};
use rfflr::simgen::{simulate, ScenarioConfig};
use rfflr::{BSplineBasis, CurveSet, FpcaMethod, RobustPpConfig, TimeGrid};

fn random_curves(n: usize, t: usize, seed: u64) -> CurveSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid::uniform(0.0, 1.0, t).unwrap();
    let amp: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.sample(StandardNormal))).collect();
    let samples = DMatrix::from_fn(n, t, |i, j| {
        let x = grid.points()[j];
        let a = amp[i];
        a[0] * 3.0 * (std::f64::consts::PI * x).sin() + a[1] * (4.0 * x).cos() + a[2] * x * x + 0.2 * a[3]
    });
    CurveSet::with_default_ids(grid, samples).unwrap()
}

fn eigen_gram(coefs: &DMatrix<f64>, gf: &GramFactor) -> DMatrix<f64> {
    coefs * gf.gram() * coefs.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn basis_is_a_partition_of_unity(t in 0.0f64..=1.0, num_basis in 4usize..60) {
        let b = BSplineBasis::new((0.0, 1.0), num_basis, 3).unwrap();
        let sum: f64 = b.eval_point(t).unwrap().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenfunctions_are_orthonormal_and_ordered(seed in 0u64..10_000, robust in any::<bool>()) {
        let curves = random_curves(40, 60, seed);
        let basis = BSplineBasis::new((0.0, 1.0), 15, 3).unwrap();
        let exp = fit_expansion(&curves, &basis).unwrap();
        let gf = GramFactor::new(&basis).unwrap();
        let model = if robust {
            fit_robust_fpca(&center_robust_l2(&exp, &gf).unwrap(), &gf, 5, &RobustPpConfig::default()).unwrap()
        } else {
            fit_classical_fpca(&center_classical(&exp), &gf, 5).unwrap()
        };
        let g = eigen_gram(model.eigen_coefs(), &gf);
        prop_assert!((g - DMatrix::identity(5, 5)).amax() <= 1e-6);
        let lambda = model.eigenvalues();
        for k in 1..lambda.len() {
            prop_assert!(lambda[k] <= lambda[k - 1] + 1e-12);
            prop_assert!(lambda[k] >= 0.0);
        }
    }

    #[test]
    fn depth_is_permutation_equivariant_and_translation_invariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let curves = random_curves(25, 30, seed);
        let d = pairwise_l2(&curves);
        let h = bandwidth_percentile(&d, 15.0).unwrap().h;
        let depth = h_modal_depth(&d, h);

        let mut perm: Vec<usize> = (0..25).collect();
        perm.reverse();
        perm.swap(0, 7);
        let permuted = curves.select(&perm);
        let dp = pairwise_l2(&permuted);
        let depth_p = h_modal_depth(&dp, bandwidth_percentile(&dp, 15.0).unwrap().h);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((depth_p[k] - depth[i]).abs() <= 1e-12);
        }

        let offset: Vec<f64> = curves.grid().points().iter().map(|t| shift * (3.0 * t).sin()).collect();
        let mut moved = curves.samples().clone();
        for mut row in moved.row_iter_mut() {
            for (v, o) in row.iter_mut().zip(&offset) {
                *v += o;
            }
        }
        let dt = pairwise_l2(&curves.with_samples(moved).unwrap());
        prop_assert!((&dt - &d).amax() <= 1e-9);
    }

    #[test]
    fn depth_decreases_as_a_curve_moves_away(seed in 0u64..10_000, step in 0.1f64..3.0) {
        let curves = random_curves(15, 20, seed);
        let d = pairwise_l2(&curves);
        let h = bandwidth_percentile(&d, 15.0).unwrap().h;
        let before = h_modal_depth(&d, h)[0];
        // Move curve 0 radially away from every other curve by pushing it
        // along a direction far outside the sample's span.
        let mut s = curves.samples().clone();
        let far = 100.0 + step;
        for j in 0..s.ncols() {
            s[(0, j)] += far;
        }
        let d2 = pairwise_l2(&curves.with_samples(s.clone()).unwrap());
        let after = h_modal_depth(&d2, h)[0];
        for j in 0..s.ncols() {
            s[(0, j)] += step;
        }
        let d3 = pairwise_l2(&curves.with_samples(s).unwrap());
        let further = h_modal_depth(&d3, h)[0];
        prop_assert!(after <= before);
        prop_assert!(further <= after);
        prop_assert!(further > 0.0);
    }

    #[test]
    fn bandwidth_is_homogeneous(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let curves = random_curves(12, 15, seed);
        let h = bandwidth_percentile(&pairwise_l2(&curves), 15.0).unwrap().h;
        let scaled = curves.with_samples(curves.samples() * c).unwrap();
        let hc = bandwidth_percentile(&pairwise_l2(&scaled), 15.0).unwrap().h;
        prop_assert!((hc - c * h).abs() <= 1e-10 * c * h);
    }

    #[test]
    fn csteps_are_monotone(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(40, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut w = DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        for i in 0..6 {
            w[(i, 1)] += 10.0;
        }
        let fit = fit_mlts(&z, &w, &MltsConfig { n_starts: 30, seed, ..Default::default() }).unwrap();
        for trace in fit.diagnostics.unwrap().traces {
            for pair in trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
            }
        }
        prop_assert_eq!(fit.subset.len(), 32);
        let resid = &w - &z * &fit.coef;
        let objective: f64 = fit.subset.iter().map(|&i| resid.row(i).norm_squared()).sum();
        prop_assert!((objective - fit.objective).abs() <= 1e-8 * objective.max(1.0));
    }
}

fn small_scenario(seed: u64, a: f64) -> rfflr::SimulatedDataset {
    simulate(&ScenarioConfig { n: 60, t: 80, a, seed, ..Default::default() }).unwrap()
}

fn quick_select(method: FpcaMethod, alpha: f64) -> SelectConfig {
    SelectConfig {
        method,
        alpha,
        num_basis: 30,
        mlts: MltsConfig { n_starts: 60, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn rbic_without_trimming_reproduces_bic_cell_by_cell() {
    let data = small_scenario(1, 0.1);
    let cfg = SelectConfig { m_max: Some(4), k_max: Some(4), ..quick_select(FpcaMethod::Robust, 1.0) };
    let grid = fit_grid(&data.x, &data.y, &cfg).unwrap();
    assert_eq!(grid.cells.len(), 16);
    for cell in &grid.cells {
        if cell.fit.is_none() {
            assert!(cell.bic.total.is_infinite() && cell.rbic.total.is_infinite());
            continue;
        }
        assert!((cell.bic.total - cell.rbic.total).abs() <= 1e-8, "{cell:?}");
    }
    assert!(grid.cells.iter().filter(|c| c.fit.is_some()).count() >= 9);
}

#[test]
fn selection_is_invariant_to_sample_order() {
    let data = small_scenario(2, 0.2);
    let cfg = SelectConfig { m_max: Some(4), k_max: Some(4), ..quick_select(FpcaMethod::Robust, 0.8) };
    let a = fit_grid(&data.x, &data.y, &cfg).unwrap().select(Criterion::Rbic).unwrap();
    let perm: Vec<usize> = (0..data.x.len()).rev().collect();
    let b = fit_grid(&data.x.select(&perm), &data.y.select(&perm), &cfg).unwrap().select(Criterion::Rbic).unwrap();
    assert_eq!((a.m, a.k), (b.m, b.k));
}

#[test]
fn single_cell_grid_returns_that_cell() {
    let data = small_scenario(3, 0.0);
    let cfg = SelectConfig { m_max: Some(1), k_max: Some(1), ..quick_select(FpcaMethod::Classical, 1.0) };
    let model = fit_grid(&data.x, &data.y, &cfg).unwrap().select(Criterion::Bic).unwrap();
    assert_eq!((model.m, model.k), (1, 1));
    assert_eq!(model.criterion_table.len(), 1);
}

#[test]
fn criterion_scores_add_up() {
    let data = small_scenario(4, 0.1);
    let grid = fit_grid(&data.x, &data.y, &quick_select(FpcaMethod::Robust, 0.8)).unwrap();
    for cell in &grid.cells {
        for c in [Criterion::Bic, Criterion::Rbic] {
            let s = cell.score(c);
            assert!((s.total - (s.deviance + s.penalty)).abs() <= 1e-10 * s.total.abs().max(1.0));
        }
        assert_eq!(cell.bic.penalty, ((cell.m * cell.k + 1) as f64) * 60f64.ln());
        assert_eq!(cell.rbic.penalty, ((cell.m * cell.k + 1) as f64) * 48f64.ln());
    }
}

#[test]
fn noiseless_linear_data_is_reproduced() {
    // Curves built inside the spline space, so the only error left is the
    // regression itself.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, t, nb) = (60, 120, 20);
    let grid = TimeGrid::uniform(0.0, 1.0, t).unwrap();
    let phi = BSplineBasis::new((0.0, 1.0), nb, 3).unwrap().eval_basis(&grid).unwrap();
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = normal(n, 3) * DMatrix::from_diagonal(&DVector::from_vec(vec![6.0, 3.0, 1.0]));
    let (ax, ay, b, mu) = (normal(3, nb), normal(3, nb), normal(3, 3), normal(1, nb));
    let mut x = &z * &ax * phi.transpose();
    for mut row in x.row_iter_mut() {
        row += &mu * phi.transpose();
    }
    let y = &z * &b * &ay * phi.transpose();
    let x = CurveSet::with_default_ids(grid.clone(), x).unwrap();
    let y = CurveSet::with_default_ids(grid, y).unwrap();
    let cfg = SelectConfig { num_basis: nb, m_max: Some(3), k_max: Some(3), ..SelectConfig::classical() };
    let model = fit_grid(&x, &y, &cfg).unwrap().model_at(3, 3, Criterion::Bic).unwrap();
    let yhat = model.predict_curves(&x).unwrap();
    let diff = y.samples() - yhat.samples();
    let rms = (diff.norm_squared() / diff.len() as f64).sqrt();
    assert!(rms <= 1e-6, "rms {rms}");
}

#[test]
fn prediction_plus_residual_is_the_observation() {
    let data = small_scenario(6, 0.1);
    let model = fit_grid(&data.x, &data.y, &quick_select(FpcaMethod::Robust, 0.8)).unwrap().select(Criterion::Rbic).unwrap();
    let yhat = model.predict_curves(&data.x).unwrap();
    let res = model.residual_curves(&data.x, &data.y).unwrap();
    assert_eq!(yhat.samples() + res.samples(), *data.y.samples());

    let zero = DMatrix::zeros(2, model.m);
    let flat = model.curves_from_scores(&zero, vec!["a".into(), "b".into()]).unwrap();
    let mean: DVector<f64> = model.fpca_y.mean_on(&model.y_grid).unwrap();
    for j in 0..mean.len() {
        assert_eq!(flat.samples()[(1, j)], mean[j]);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let data = small_scenario(7, 0.2);
    let cfg = quick_select(FpcaMethod::Robust, 0.8);
    let a = fit_grid(&data.x, &data.y, &cfg).unwrap().select(Criterion::Rbic).unwrap();
    let b = fit_grid(&data.x, &data.y, &cfg).unwrap().select(Criterion::Rbic).unwrap();
    assert_eq!(a, b);
}
