use std::sync::Arc;

use corrnoise::free_energy::kl_gaussian;
use corrnoise::gibbs::{importance_posterior, WeightedEnsemble};
use corrnoise::io::{write_ensemble, write_path};
use corrnoise::sampler::simulate_pair;
use corrnoise::singularity::{covariation_decay_study, covariation_sum, rn_degeneration_experiment};
use corrnoise::{make_dyadic_grid, Coupling, GaussianLaw, Layout, LinearModel, Path, PathPair, SeedSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn grid(level: u32) -> Arc<TimeGrid> {
    Arc::new(make_dyadic_grid(level, 1.0).unwrap())
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn spd(n: usize, entries: &[f64], ridge: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()]);
    &b * b.transpose() + DMatrix::identity(n, n) * ridge
}

fn model_strategy() -> impl Strategy<Value = LinearModel> {
    (-2.0f64..1.0, -2.0f64..2.0, 0.3f64..2.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_map(|(a, c, s0, s1, x0)| LinearModel::scalar(a, c, s0, s1, x0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_normalise_and_ess_is_bounded(m in model_strategy(), seed in any::<u64>(), size in 2usize..300) {
        let g = grid(4);
        let y = corrnoise::sampler::simulate_joint(&m, &g, SeedSpec::new(seed, 0)).unwrap().y;
        let post = importance_posterior(&m, &g, &y, size, SeedSpec::new(seed, 1)).unwrap();
        let w = post.ensemble.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let ess = post.diagnostics.ess;
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= size as f64 + 1e-9, "ess {}", ess);
    }

    #[test]
    fn raw_log_weights_normalise(lw in prop::collection::vec(-800.0f64..800.0, 2..50)) {
        let g = grid(0);
        let n = lw.len();
        let paths = vec![Path::new(g.clone(), DMatrix::zeros(2, 1)).unwrap(); n];
        let mut e = WeightedEnsemble::new((0..n as u64).collect(), paths, lw).unwrap();
        e.normalize().unwrap();
        prop_assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(e.ess() >= 1.0 - 1e-9 && e.ess() <= n as f64 + 1e-9);
    }

    #[test]
    fn kl_is_nonnegative(
        n in 1usize..5,
        pe in prop::collection::vec(-1.0f64..1.0, 1..25),
        qe in prop::collection::vec(-1.0f64..1.0, 1..25),
        pm in prop::collection::vec(-3.0f64..3.0, 4),
        qm in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let layout = Layout::signal_only(n, 1);
        let p = GaussianLaw::new(DVector::from_fn(n, |i, _| pm[i]), spd(n, &pe, 0.1), layout).unwrap();
        let q = GaussianLaw::new(DVector::from_fn(n, |i, _| qm[i]), spd(n, &qe, 0.1), layout).unwrap();
        prop_assert!(kl_gaussian(&p, &q).unwrap() >= -1e-10);
        prop_assert!(kl_gaussian(&p, &p).unwrap().abs() < 1e-10);
    }

    #[test]
    fn covariation_is_bilinear_and_additive(seed in any::<u64>(), scale in -4.0f64..4.0, split in 1usize..255) {
        let g = grid(8);
        let m = LinearModel::benchmark();
        let pair = simulate_pair(&m, &g, Coupling::Joint, SeedSpec::new(seed, 0)).unwrap();
        let n = g.steps();
        let whole = covariation_sum(&pair, 0, n);
        let parts = covariation_sum(&pair, 0, split) + covariation_sum(&pair, split, n);
        prop_assert!((&whole - parts).amax() <= 1e-12 * (1.0 + whole.amax()));

        // Power-of-two scaling is exact in floating point.
        let doubled = PathPair::new(pair.x.scaled(2.0), pair.y.clone(), Coupling::Joint).unwrap();
        prop_assert_eq!(covariation_sum(&doubled, 0, n), &whole * 2.0);
        let scaled = PathPair::new(pair.x.scaled(scale), pair.y.clone(), Coupling::Joint).unwrap();
        let expect = &whole * scale;
        prop_assert!((covariation_sum(&scaled, 0, n) - &expect).amax() <= 1e-12 * (1.0 + expect.amax()));
    }

    #[test]
    fn grids_are_dyadic(level in 0u32..14, horizon in 0.1f64..10.0) {
        let g = make_dyadic_grid(level, horizon).unwrap();
        prop_assert_eq!(g.steps(), 1usize << level);
        prop_assert_eq!(g.times()[0], 0.0);
        prop_assert_eq!(*g.times().last().unwrap(), horizon);
        prop_assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        let fine = g.refine().unwrap();
        for (i, t) in g.times().iter().enumerate() {
            prop_assert_eq!(fine.times()[2 * i], *t);
        }
    }

    #[test]
    fn validation_is_pure(m in model_strategy()) {
        let before = m.clone();
        let r1 = m.validate();
        let r2 = m.validate();
        prop_assert_eq!(&r1, &r2);
        prop_assert_eq!(&m, &before);
        prop_assert!(r1.is_ok());
    }
}

#[test]
fn validation_reports_every_issue() {
    let m = LinearModel::new(
        DMatrix::from_element(1, 1, f64::NAN),
        DMatrix::zeros(2, 2),
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
        DVector::zeros(1),
        -1.0,
    );
    let r = m.validate();
    assert!(r.issues.len() >= 3, "{r}");
    assert_eq!(r, m.validate());
}

fn ensemble_bytes(post: &corrnoise::gibbs::GibbsPosterior) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ensemble(&mut buf, &[], &post.ensemble).unwrap();
    for p in post.ensemble.paths.iter().take(3) {
        write_path(&mut buf, &[], p, "x").unwrap();
    }
    buf
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let m = LinearModel::benchmark();
    let g = grid(6);
    let y = corrnoise::sampler::simulate_joint(&m, &g, SeedSpec::new(60, 0)).unwrap().y;
    let run = || {
        let post = importance_posterior(&m, &g, &y, 2000, SeedSpec::new(61, 0)).unwrap();
        let study = covariation_decay_study(&m, 1.0, &[6, 8], 200, Coupling::Product, SeedSpec::new(62, 0)).unwrap();
        let rn = rn_degeneration_experiment(1.0, &[8, 16], 500, Coupling::Product, SeedSpec::new(63, 0)).unwrap();
        (ensemble_bytes(&post), post.track.means.clone(), study, rn)
    };
    let one = pool(1).install(run);
    let four = pool(4).install(run);
    assert_eq!(one.0, four.0);
    assert_eq!(one.1, four.1);
    assert_eq!(one.2, four.2);
    assert_eq!(one.3, four.3);
}
