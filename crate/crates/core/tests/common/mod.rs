//! Test-only oracles, written independently of the library's own numerics.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use corrnoise::io::read_path;
use corrnoise::{LinearModel, Path, TimeGrid};
use nalgebra::{DMatrix, DVector};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The stored benchmark observation (recorded at level 8), coarsened.
pub fn benchmark_y(level: u32) -> (Arc<TimeGrid>, Path) {
    let f = std::fs::File::open(fixture("benchmark_y_level8.csv")).expect("fixture");
    let y = read_path(f).unwrap().coarsen(level).unwrap();
    (y.grid().clone(), y)
}

pub fn benchmark(level: u32) -> (LinearModel, Arc<TimeGrid>, Path) {
    let (g, y) = benchmark_y(level);
    (LinearModel::benchmark(), g, y)
}

/// Discrete Kalman filter for the Euler chain with independent noises
/// (`sigma1 = 0`):
///
/// ```text
/// x_{i+1} = (I + A dt) x_i + sigma0 dB_i
/// dy_i / dt = C x_i + v_i,   v_i ~ N(0, I / dt)
/// ```
///
/// Entry `i` is the law of `x_i` given `dy_0 .. dy_{i-1}`: update with
/// `dy_i`, then predict.
pub fn textbook_kalman(model: &LinearModel, y: &Path) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    assert!(model.sigma1.iter().all(|v| *v == 0.0));
    let d = model.x0.len();
    let n = model.c.nrows();
    let dt = y.grid().dt();
    let f = DMatrix::identity(d, d) + &model.a * dt;
    let q = &model.sigma0 * model.sigma0.transpose() * dt;
    let r = DMatrix::identity(n, n) / dt;
    let mut m = model.x0.clone();
    let mut p = DMatrix::zeros(d, d);
    let mut means = vec![m.clone()];
    let mut covs = vec![p.clone()];
    for i in 0..y.grid().steps() {
        let z = (y.state(i + 1) - y.state(i)) / dt;
        let s = &model.c * &p * model.c.transpose() + &r;
        let k = &p * model.c.transpose() * s.try_inverse().unwrap();
        m = &m + &k * (z - &model.c * &m);
        p = (DMatrix::identity(d, d) - &k * &model.c) * &p;
        m = &f * m;
        p = &f * p * f.transpose() + &q;
        means.push(m.clone());
        covs.push(p.clone());
    }
    (means, covs)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Gauss-Hermite rule for the standard normal weight (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let k = x.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let r = x - mean;
    -0.5 * (r.dot(&(&inv * &r)) + cov.determinant().ln() + k * (2.0 * std::f64::consts::PI).ln())
}

/// `KL(p || q)` in two dimensions by composite Simpson integration of
/// `p log(p / q)` over a +-12 standard-deviation box in `p`'s whitened
/// coordinates.
pub fn kl_by_quadrature_2d(
    mp: &DVector<f64>,
    sp: &DMatrix<f64>,
    mq: &DVector<f64>,
    sq: &DMatrix<f64>,
) -> f64 {
    let l = sp.clone().cholesky().unwrap().l();
    let nodes = 1201;
    let h = 24.0 / (nodes - 1) as f64;
    let w = |i: usize| -> f64 {
        if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for i in 0..nodes {
        let z1 = -12.0 + i as f64 * h;
        for j in 0..nodes {
            let z2 = -12.0 + j as f64 * h;
            let x = mp + &l * DVector::from_vec(vec![z1, z2]);
            let integrand = gaussian_log_pdf(&x, mp, sp) - gaussian_log_pdf(&x, mq, sq);
            total += w(i) * w(j) * phi(z1) * phi(z2) * integrand;
        }
    }
    total * (h / 3.0) * (h / 3.0)
}
