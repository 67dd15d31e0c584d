//! Estimator properties and Monte Carlo oracles.

use fourierformer_core::estimators::*;
use fourierformer_core::kernels::PhiKernel;
use fourierformer_core::numerics::{dot, Rng, Tensor};
use proptest::prelude::*;

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut k = rng.normal_tensor(&[n, d], 1.0);
    for i in 0..n {
        let norm = dot(k.row(i), k.row(i)).sqrt();
        k.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    k
}

#[test]
fn softmax_equivalence_on_50_instances() {
    let mut rng = Rng::new(2024);
    for _ in 0..50 {
        let n = 1 + rng.below(16);
        let d = 1 + rng.below(16);
        let keys = unit_rows(&mut rng, n, d);
        let queries = rng.normal_tensor(&[n, d], 1.0);
        let dv = 1 + rng.below(4);
        let values = rng.normal_tensor(&[n, dv], 1.0);
        assert!(softmax_equivalence_check(&keys, &values, &queries).unwrap() <= 1e-10);
    }
}

#[test]
fn single_key_equivalence_is_exact() {
    let keys = Tensor::from_rows(&[[0.6, 0.8]]).unwrap();
    let values = Tensor::from_rows(&[[3.0, -1.0]]).unwrap();
    let q = Tensor::from_rows(&[[5.0, 1.0]]).unwrap();
    assert_eq!(softmax_equivalence_check(&keys, &values, &q).unwrap(), 0.0);
}

#[test]
fn fourier_density_is_nonnegative() {
    let mut rng = Rng::new(1);
    let samples = DensityModel::standard_normal(2).sample(&mut rng, 200).unwrap();
    for l in [2u32, 4, 6] {
        let k = PhiKernel::new(l).unwrap();
        for _ in 0..10_000 / 3 {
            let x = rng.uniform_tensor(&[2], -5.0, 5.0);
            assert!(fourier_density(&samples, 2.0, &k, x.data()).unwrap() >= 0.0);
        }
    }
}

#[test]
fn fourier_density_mass_is_near_one() {
    let mut rng = Rng::new(5);
    let n = 500;
    let samples = DensityModel::standard_normal(1).sample(&mut rng, n).unwrap();
    let r = (n as f64).powf(1.0 / 3.0);
    let grid = Grid::new(1, -60.0, 60.0, 24001).unwrap();
    for l in [2u32, 4] {
        let k = PhiKernel::new(l).unwrap();
        let vals: Vec<f64> = grid.nodes().iter().map(|x| fourier_density(&samples, r, &k, x).unwrap()).collect();
        let mass = grid.integrate(&vals);
        assert!((0.9..=1.1).contains(&mass), "l={l} mass {mass}");
    }
}

#[test]
fn kde_beats_an_oversmoothed_kde() {
    let truth = DensityModel::standard_normal(1);
    let grid = Grid::new(1, -8.0, 8.0, 801).unwrap();
    let rng = Rng::new(8);
    let good = mise(&DensityEstimator::GaussianKde { sigma: 0.35 }, &truth, &grid, 500, 5, &rng).unwrap();
    let bad = mise(&DensityEstimator::GaussianKde { sigma: 10.0 }, &truth, &grid, 500, 5, &rng).unwrap();
    assert!(good.mean < bad.mean);
}

#[test]
fn fourier_density_mise_is_u_shaped_in_r() {
    let truth = DensityModel::standard_normal(1);
    let grid = Grid::new(1, -6.0, 6.0, 2401).unwrap();
    let rng = Rng::new(9);
    let n = 2000;
    let r = (n as f64).powf(1.0 / 3.0);
    let at = |r: f64| mise(&DensityEstimator::Fourier { r, exponent: 2 }, &truth, &grid, n, 3, &rng).unwrap().mean;
    let mid = at(r);
    assert!(mid < at(r / 8.0));
    assert!(mid < at(8.0 * r));
}

#[test]
fn fourier_regression_beats_an_oversmoothed_bandwidth() {
    let mut rng = Rng::new(10);
    let n = 500;
    let prob = RegressionProblem::generate(
        &DensityModel::Laplace { dim: 1, scale: 1.0 },
        TrueFunction::Sin,
        0.1,
        n,
        &mut rng,
    )
    .unwrap();
    let k = PhiKernel::new(4).unwrap();
    let points = Tensor::new(vec![20, 1], (0..20).map(|i| -1.5 + 3.0 * i as f64 / 19.0).collect()).unwrap();
    let r = (n as f64).powf(1.0 / 5.0);
    assert!(prob.fourier_mse(r, &k, &points).unwrap() < prob.fourier_mse(r / 8.0, &k, &points).unwrap());
}

#[test]
fn both_rate_experiments_improve_from_100_to_1600() {
    for kind in [RateKind::DensityMise, RateKind::RegressionMse] {
        let mut wins = 0;
        for rep in 0..20 {
            let cfg = match kind {
                RateKind::DensityMise => RateConfig::density(vec![100, 400, 1600], 1, 2, 500 + rep).unwrap(),
                RateKind::RegressionMse => RateConfig::regression(vec![100, 400, 1600], 1, 4, 500 + rep),
            };
            let t = rate_experiment(&cfg).unwrap();
            if t.rows[2].error_mean < t.rows[0].error_mean {
                wins += 1;
            }
        }
        assert!(wins >= 19, "{kind:?}: {wins}/20");
    }
}

#[test]
fn mixture_table_is_well_formed_for_both_estimators() {
    let truth = DensityModel::bimodal(1, 1.5, 0.7);
    let grid = Grid::new(1, -8.0, 8.0, 1601).unwrap();
    let rng = Rng::new(12);
    let n = 1600;
    let kde = mise(&DensityEstimator::GaussianKde { sigma: 0.3 }, &truth, &grid, n, 3, &rng).unwrap();
    let r = (n as f64).powf(1.0 / 3.0);
    let four = mise(&DensityEstimator::Fourier { r, exponent: 2 }, &truth, &grid, n, 3, &rng).unwrap();
    assert!(kde.mean > 0.0 && four.mean > 0.0);
    let mut cfg = RateConfig::density(vec![100, 400, 1600], 2, 2, 3).unwrap();
    cfg.truth = truth;
    cfg.grid = Some(grid);
    let t = rate_experiment(&cfg).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert!(t.rows.iter().all(|r| r.error_mean > 0.0 && r.error_stderr >= 0.0));
}

#[test]
fn rate_tables_do_not_depend_on_thread_count() {
    let cfg = RateConfig::density(vec![50, 100, 200], 6, 2, 4).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| rate_experiment(&cfg).unwrap());
    let b = four.install(|| rate_experiment(&cfg).unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn nw_regressors_stay_in_the_convex_hull(seed in any::<u64>(), n in 1usize..=20, d in 1usize..=3, l in prop::sample::select(vec![2u32, 4, 6])) {
        let mut rng = Rng::new(seed);
        let keys = rng.normal_tensor(&[n, d], 1.0);
        let values = rng.normal_tensor(&[n, 2], 3.0);
        let q = rng.normal_tensor(&[d], 0.5);
        let g = gaussian_nw_regress(&keys, &values, GaussianBandwidth::new(0.7).unwrap(), q.data()).unwrap();
        let outputs = match fourier_nw_regress(&keys, &values, 0.8, &PhiKernel::new(l).unwrap(), q.data()) {
            Ok(f) => vec![g, f],
            Err(_) => vec![g],
        };
        for out in outputs {
            for c in 0..2 {
                let col = (0..n).map(|j| values.get(j, c));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
            }
        }
    }
}
