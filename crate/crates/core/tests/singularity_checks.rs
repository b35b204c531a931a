use std::sync::Arc;

use corrnoise::sampler::{simulate_joint, simulate_pair};
use corrnoise::singularity::{
    classification_experiment, classify_coupling, covariation_decay_study, degeneration_fit, discrete_log_rn,
    empirical_qv_blocks, quadratic_covariation, rn_degeneration_experiment, rn_normalization,
};
use corrnoise::stats::mean_and_se;
use corrnoise::{make_dyadic_grid, Coupling, LinearModel, PathPair, SeedSpec, TimeGrid};
use nalgebra::DVector;
use rayon::prelude::*;

fn grid(level: u32) -> Arc<TimeGrid> {
    Arc::new(make_dyadic_grid(level, 1.0).unwrap())
}

const LEVELS: [u32; 7] = [6, 7, 8, 9, 10, 11, 12];

#[test]
fn self_covariation_is_quadratic_variation() {
    // c = 0 makes y a standard Brownian motion, so E[Q] = t exactly.
    let m = LinearModel::scalar(-1.0, 0.0, 1.0, 0.5, 1.0, 1.0);
    let g = grid(12);
    let q: Vec<f64> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let y = simulate_joint(&m, &g, SeedSpec::new(40, i)).unwrap().y;
            let pair = PathPair::new(y.clone(), y, Coupling::Joint).unwrap();
            quadratic_covariation(&pair, &m, 0.5).unwrap().value[(0, 0)]
        })
        .collect();
    let (mu, se) = mean_and_se(&q);
    assert!((mu - 0.5).abs() < 4.0 * se, "{mu} (se {se})");
}

#[test]
fn joint_covariation_tracks_sigma1_at_every_level() {
    let m = LinearModel::benchmark();
    let study = covariation_decay_study(&m, 1.0, &LEVELS, 1000, Coupling::Joint, SeedSpec::new(41, 0)).unwrap();
    for row in &study.rows {
        assert!((row.target_mean[(0, 0)] - 0.5).abs() < 1e-12);
        let dev = (row.mean[(0, 0)] - 0.5).abs();
        assert!(dev < 4.0 * row.mean_se[(0, 0)], "level {}: {}", row.level, row.mean[(0, 0)]);
    }
    let first = study.rows.first().unwrap().mean_norm;
    let last = study.rows.last().unwrap().mean_norm;
    assert!(last > 0.9 * first, "joint |Q| decays: {first} -> {last}");
}

#[test]
fn product_covariation_variance_halves_per_level() {
    let m = LinearModel::benchmark();
    let study = covariation_decay_study(&m, 1.0, &LEVELS, 1000, Coupling::Product, SeedSpec::new(42, 0)).unwrap();
    let slope = study.log2_variance_fit.slope;
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
    let top = study.rows.last().unwrap();
    assert!(top.mean[(0, 0)].abs() < 4.0 * top.mean_se[(0, 0)]);
}

#[test]
fn driftless_unobserved_covariation_has_zero_mean() {
    let m = LinearModel::scalar(0.0, 0.0, 1.0, 0.5, 0.0, 1.0);
    let study = covariation_decay_study(&m, 1.0, &LEVELS, 1000, Coupling::Product, SeedSpec::new(43, 0)).unwrap();
    for row in &study.rows {
        assert!(row.mean[(0, 0)].abs() < 4.0 * row.mean_se[(0, 0)], "level {}", row.level);
    }
}

#[test]
fn radon_nikodym_ratio_is_normalised() {
    for n in [1usize, 2, 4, 8] {
        let (mean, se) = rn_normalization(n, 1.0 / n as f64, 100_000, SeedSpec::new(44, n as u64)).unwrap();
        assert!((mean - 1.0).abs() < 4.0 * se, "N={n}: {mean} (se {se})");
    }
}

#[test]
fn radon_nikodym_degenerates_in_opposite_directions() {
    let ns = [8usize, 16, 32, 64];
    let prod = rn_degeneration_experiment(1.0, &ns, 10_000, Coupling::Product, SeedSpec::new(45, 0)).unwrap();
    let joint = rn_degeneration_experiment(1.0, &ns, 10_000, Coupling::Joint, SeedSpec::new(46, 0)).unwrap();
    assert!(degeneration_fit(&prod).slope < 0.0);
    assert!(degeneration_fit(&joint).slope > 0.0);
    for w in prod.windows(2) {
        assert!(w[1].mean_log_rn < w[0].mean_log_rn + 3.0 * w[0].se_log_rn.hypot(w[1].se_log_rn));
    }
    let local = |a: usize, b: usize| (prod[b].mean_log_rn - prod[a].mean_log_rn) / (prod[b].n - prod[a].n) as f64;
    let (s1, s2) = (local(1, 2), local(2, 3));
    assert!(((s1 - s2) / s2).abs() < 0.25, "local slopes {s1}, {s2}");
    for n in ns {
        let z = DVector::zeros(2 * n);
        let v = discrete_log_rn(&z, n, 1.0 / n as f64).unwrap();
        assert_eq!(v, n as f64 / 2.0 * std::f64::consts::LN_2);
    }
}

#[test]
fn classifier_improves_with_level() {
    let m = LinearModel::benchmark();
    let rates: Vec<_> = [8, 10, 12]
        .into_iter()
        .map(|l| classification_experiment(&m, l, 1000, 0.5, SeedSpec::new(47, l as u64)).unwrap())
        .collect();
    let slack = |p: f64| 3.0 * (p * (1.0 - p) / 1000.0).sqrt();
    for w in rates.windows(2) {
        for (a, b) in [
            (w[0].joint_error_rate, w[1].joint_error_rate),
            (w[0].product_error_rate, w[1].product_error_rate),
        ] {
            assert!(b <= a + slack(a.max(b)).max(1e-3), "{rates:?}");
        }
    }
    let top = rates.last().unwrap();
    assert!(top.joint_error_rate <= 0.01 && top.product_error_rate <= 0.01, "{top:?}");
}

#[test]
fn classifier_refuses_uncorrelated_model() {
    let m = LinearModel::scalar(-1.0, 1.0, 1.0, 0.0, 1.0, 1.0);
    let pair = simulate_joint(&m, &grid(8), SeedSpec::new(48, 0)).unwrap();
    let err = classify_coupling(&pair, &m, 0.5).unwrap_err();
    assert!(err.to_string().contains("model violates separation"), "{err}");
}

#[test]
fn quadratic_variation_blocks() {
    let g = grid(12);
    let m = LinearModel::benchmark();
    for coupling in [Coupling::Joint, Coupling::Product] {
        let pair = simulate_pair(&m, &g, coupling, SeedSpec::new(49, 0)).unwrap();
        let qv = empirical_qv_blocks(&pair, &m).unwrap();
        let dev = (&qv.estimate - &qv.expected).abs();
        assert!(dev.iter().zip(qv.standard_error.iter()).all(|(d, s)| *d <= 4.0 * s), "{coupling:?}");
    }
    let joint_expected = nalgebra::dmatrix![1.25, 0.5; 0.5, 1.0];
    let pair = simulate_pair(&m, &g, Coupling::Joint, SeedSpec::new(49, 1)).unwrap();
    assert_eq!(empirical_qv_blocks(&pair, &m).unwrap().expected, joint_expected);

    // Without shared noise the two couplings share one block matrix.
    let m0 = LinearModel::scalar(-1.0, 1.0, 1.0, 0.0, 1.0, 1.0);
    let j = empirical_qv_blocks(&simulate_pair(&m0, &g, Coupling::Joint, SeedSpec::new(50, 0)).unwrap(), &m0).unwrap();
    let p = empirical_qv_blocks(&simulate_pair(&m0, &g, Coupling::Product, SeedSpec::new(51, 0)).unwrap(), &m0).unwrap();
    for k in 0..4 {
        let tol = 4.0 * j.standard_error[k].hypot(p.standard_error[k]);
        assert!((j.estimate[k] - p.estimate[k]).abs() <= tol, "entry {k}");
    }
}
