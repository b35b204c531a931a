mod common;

use std::sync::Arc;

use corrnoise::free_energy::{
    expected_energy, kl_gaussian, minimize_in, reference_law, shift_curvature, CandidateFamily, CandidateMeasure,
    FreeEnergyProblem,
};
use corrnoise::gibbs::estimate_log_normalizer;
use corrnoise::oracle::exact_log_normalizer;
use corrnoise::stats::quadratic_fit;
use corrnoise::{make_dyadic_grid, GaussianLaw, Layout, LinearModel, Path, SeedSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn grid(level: u32) -> Arc<TimeGrid> {
    Arc::new(make_dyadic_grid(level, 1.0).unwrap())
}

const M: usize = 20_000;

#[test]
fn reference_covariance_is_sigma0_squared_min() {
    let m = LinearModel::scalar(-1.0, 1.0, 2.0, 0.5, 1.0, 1.0);
    let g = grid(2);
    let y = Path::new(g.clone(), DMatrix::from_fn(5, 1, |i, _| i as f64 * 0.3)).unwrap();
    let law = reference_law(&m, &g, &y).unwrap();
    // x at t=0.25 and t=0.75 are coordinates 0 and 2.
    assert!((law.cov[(0, 2)] - 1.0).abs() < 1e-14);
    assert!((law.mean[3] - (1.0 + 0.5 * 1.2)).abs() < 1e-14);
}

#[test]
fn gaussian_kl_matches_quadrature() {
    let (m, g, y) = common::benchmark(1);
    let problem = FreeEnergyProblem::new(&m, &g, &y).unwrap();
    let (p, q) = (problem.posterior(), problem.reference());
    let kl = kl_gaussian(p, q).unwrap();
    let quad = common::kl_by_quadrature_2d(&p.mean, &p.cov, &q.mean, &q.cov);
    assert!((kl - quad).abs() < 1e-6, "{kl} vs {quad}");
    let back = kl_gaussian(q, p).unwrap();
    let quad_back = common::kl_by_quadrature_2d(&q.mean, &q.cov, &p.mean, &p.cov);
    assert!((back - quad_back).abs() < 1e-6, "{back} vs {quad_back}");
}

#[test]
fn point_mass_surrogate_recovers_constant_path_energy() {
    let (a, c, s0, s1, x0) = (-1.5, 0.8, 1.3, 0.4, 0.7);
    let m = LinearModel::scalar(a, c, s0, s1, x0, 1.0);
    let g = grid(4);
    let y = Path::new(g.clone(), DMatrix::zeros(g.len(), 1)).unwrap();
    let n = g.steps();
    let eps = 1e-6;
    let law = GaussianLaw::new(
        DVector::from_element(n, x0),
        DMatrix::identity(n, n) * eps,
        Layout::signal_only(n, 1),
    )
    .unwrap();
    let cand = CandidateMeasure::new(law, "point").unwrap();
    let e = expected_energy(&cand, &m, &y, 200, SeedSpec::new(31, 0)).unwrap();
    let beta = a - s1 * c;
    let drift = 0.5 * x0 * beta * beta * x0 / (s0 * s0);
    let observation = 0.5 * (c * x0).powi(2);
    let hand = drift + observation;
    assert!((e.mean - hand).abs() < 1e-4, "{} vs {hand}", e.mean);
}

#[test]
fn free_energy_gaps_match_closed_form_kl() {
    let (m, g, y) = common::benchmark(6);
    let problem = FreeEnergyProblem::new(&m, &g, &y).unwrap();
    let seed = SeedSpec::new(32, 0);
    let family = CandidateFamily::Explicit(vec![
        problem.posterior_candidate(),
        problem.reference_candidate(),
        problem.shifted_posterior(0.5),
    ]);
    let out = minimize_in(&problem, &family, M, seed).unwrap();
    let [post, reference, shifted] = &out.reports[..] else { panic!() };
    assert_eq!(post.gibbs_gap, 0.0);
    assert!(post.gap_predicted.abs() < 1e-10);
    // The reference has zero KL to itself, so its total is its energy alone.
    assert!(reference.kl_to_reference.abs() < 1e-10);
    assert!((reference.total - reference.expected_energy).abs() < 1e-10);
    for r in [reference, shifted] {
        assert!(r.gibbs_gap > 0.0);
        assert!(
            (r.gibbs_gap - r.gap_predicted).abs() <= 3.0 * r.gap_standard_error,
            "{}: {} vs {} (se {})",
            r.label,
            r.gibbs_gap,
            r.gap_predicted,
            r.gap_standard_error
        );
    }
    assert_eq!(out.best, 0);
}

#[test]
fn posterior_free_energy_is_minus_log_normalizer() {
    let (m, g, y) = common::benchmark(6);
    let problem = FreeEnergyProblem::new(&m, &g, &y).unwrap();
    let base = problem.baseline(M, SeedSpec::new(33, 0)).unwrap();
    let lz = estimate_log_normalizer(&m, &g, &y, 100_000, SeedSpec::new(34, 0)).unwrap();
    let tol = 3.0 * base.energy.standard_error.hypot(lz.standard_error);
    assert!((base.total + lz.log_z).abs() <= tol, "{} vs {}", base.total, -lz.log_z);
    let exact = exact_log_normalizer(&m, &g, &y).unwrap();
    assert!((base.total + exact).abs() <= 3.0 * base.energy.standard_error);
}

#[test]
fn shift_family_minimum_and_curvature() {
    let (m, g, y) = common::benchmark(6);
    let problem = FreeEnergyProblem::new(&m, &g, &y).unwrap();
    let n = g.steps();
    let v = DVector::from_element(n, 1.0);
    let shifts = vec![-1.0, -0.5, 0.0, 0.5, 1.0];
    let family = CandidateFamily::posterior_shifts(&problem, v.clone(), shifts.clone());
    let out = minimize_in(&problem, &family, M, SeedSpec::new(35, 0)).unwrap();
    assert_eq!(shifts[out.best], 0.0);
    for r in &out.reports {
        assert!(r.gibbs_gap >= -3.0 * r.gap_standard_error);
    }
    let totals: Vec<f64> = out.reports.iter().map(|r| r.total).collect();
    let [_, _, c2] = quadratic_fit(&shifts, &totals);
    let exact = shift_curvature(problem.posterior(), &v).unwrap();
    assert!(c2 > 0.0);
    let rel = (2.0 * c2 - exact).abs() / exact;
    assert!(rel < 0.2, "fitted {} vs {exact}", 2.0 * c2);
}

#[test]
fn singleton_family_returns_its_member() {
    let (m, g, y) = common::benchmark(4);
    let problem = FreeEnergyProblem::new(&m, &g, &y).unwrap();
    let family = CandidateFamily::Explicit(vec![problem.reference_candidate()]);
    let out = minimize_in(&problem, &family, 1000, SeedSpec::new(36, 0)).unwrap();
    assert_eq!(out.best, 0);
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.best_candidate.label, "reference");
    assert_eq!(&out.best_candidate.law, problem.reference());
}
