//! Failure of absolute continuity between the joint law and the product of
//! marginals when signal and observation share noise.
//!
//! Two experiments:
//!
//! * the random-walk pair `x_{k+1} = x_k + W + B`, `y_{k+1} = y_k + W`, whose
//!   joint/product density ratio degenerates as the number of steps grows;
//! * dyadic quadratic covariation `Q_n = sum dx dy^T`, which tends to
//!   `int sigma1 ds` under the joint law and to 0 under the product law.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Coupling, LinearModel, PathPair, SignalObservationModel, TimeGrid};
use crate::par;
use crate::rng::SeedSpec;
use crate::sampler::simulate_pair;
use crate::stats::{linear_fit, mean_and_se, variance, variance_se, LinearFit};

/// Largest random-walk length for dense covariance matrices.
pub const MAX_WALK_STEPS: usize = 4096;

/// Smallest grid level at which [`classify_coupling`] is trusted.
pub const MIN_CLASSIFIER_LEVEL: u32 = 8;

/// Below this norm `int sigma1 ds` cannot separate the two limits.
pub const SEPARATION_FLOOR: f64 = 1e-8;

fn check_walk(n: usize, dt: f64) -> Result<()> {
    if n == 0 || n > MAX_WALK_STEPS {
        return Err(Error::invalid(format!(
            "random-walk length must be in 1..={MAX_WALK_STEPS}, got {n}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// `A_ij = dt min(i, j)` (1-indexed), the covariance of a random walk with
/// `N(0, dt)` steps.
pub fn walk_covariance(n: usize, dt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| dt * ((i.min(j) + 1) as f64))
}

/// Inverse of `min(i, j)`: tridiagonal with 2 on the diagonal (1 in the last
/// entry) and -1 off the diagonal.
pub fn unit_walk_precision(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 if i + 1 == n => 1.0,
        0 => 2.0,
        1 => -1.0,
        _ => 0.0,
    })
}

/// Covariances of `(x_1..x_N, y_1..y_N)`: joint `[[2,1],[1,1]] (x) A`,
/// product `[[2,0],[0,1]] (x) A`.
pub fn discrete_cov_matrices(n: usize, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_walk(n, dt)?;
    let a = walk_covariance(n, dt);
    let joint = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]).kronecker(&a);
    let product = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]).kronecker(&a);
    Ok((joint, product))
}

/// `Cov_joint^-1 - Cov_prod^-1 = (1/dt) [[1/2,-1],[-1,1]] (x) (A/dt)^-1`.
pub fn precision_gap_closed_form(n: usize, dt: f64) -> Result<DMatrix<f64>> {
    check_walk(n, dt)?;
    let k = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 1.0]) / dt;
    Ok(k.kronecker(&unit_walk_precision(n)))
}

/// Log density ratio of the joint random-walk pair against the product of
/// its marginals, with the precision gap obtained by explicit inversion.
#[derive(Debug, Clone)]
pub struct DiscreteRnRatio {
    n: usize,
    gap: DMatrix<f64>,
    log_prefactor: f64,
}

fn spd_inverse(m: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let ch = Cholesky::new(m).ok_or_else(|| Error::numerical("covariance inversion failed"))?;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((ch.inverse(), logdet))
}

impl DiscreteRnRatio {
    pub fn new(n: usize, dt: f64) -> Result<Self> {
        let (joint, product) = discrete_cov_matrices(n, dt)?;
        let (pj, ldj) = spd_inverse(joint)?;
        let (pp, ldp) = spd_inverse(product)?;
        Ok(Self {
            n,
            gap: pj - pp,
            // 1/2 log(det Cov_prod / det Cov_joint), which is (N/2) ln 2.
            log_prefactor: 0.5 * (ldp - ldj),
        })
    }

    pub fn precision_gap(&self) -> &DMatrix<f64> {
        &self.gap
    }

    pub fn log_prefactor(&self) -> f64 {
        self.log_prefactor
    }

    pub fn log_rn(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != 2 * self.n {
            return Err(Error::invalid(format!(
                "expected a vector of length {}, got {}",
                2 * self.n,
                z.len()
            )));
        }
        Ok(0.5 * self.n as f64 * std::f64::consts::LN_2 - 0.5 * z.dot(&(&self.gap * z)))
    }
}

/// `(N/2) ln 2 - 1/2 z^T (Cov_joint^-1 - Cov_prod^-1) z`.
pub fn discrete_log_rn(z: &DVector<f64>, n: usize, dt: f64) -> Result<f64> {
    DiscreteRnRatio::new(n, dt)?.log_rn(z)
}

fn walk_increments(n: usize, dt: f64, seed: SeedSpec) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed.rng();
    let sd = dt.sqrt();
    let mut w = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        w.push(sd * rng.sample::<f64, _>(StandardNormal));
        b.push(sd * rng.sample::<f64, _>(StandardNormal));
    }
    (w, b)
}

fn walk_pair(n: usize, dt: f64, seed: SeedSpec) -> (Vec<f64>, Vec<f64>) {
    let (w, b) = walk_increments(n, dt, seed);
    let (mut x, mut y) = (0.0, 0.0);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for k in 0..n {
        x += w[k] + b[k];
        y += w[k];
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

/// One draw `z = (x_1..x_N, y_1..y_N)` of the random-walk pair.
pub fn sample_walk_pair(n: usize, dt: f64, coupling: Coupling, seed: SeedSpec) -> Result<DVector<f64>> {
    check_walk(n, dt)?;
    let (xs, ys) = match coupling {
        Coupling::Joint => walk_pair(n, dt, seed),
        Coupling::Product => (walk_pair(n, dt, seed.derive(1)).0, walk_pair(n, dt, seed.derive(2)).1),
        Coupling::Reference => return Err(Error::invalid("random-walk pair has no reference law")),
    };
    Ok(DVector::from_iterator(2 * n, xs.into_iter().chain(ys)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnExperimentRow {
    pub n: usize,
    pub delta_t: f64,
    pub mean_log_rn: f64,
    pub sd_log_rn: f64,
    pub se_log_rn: f64,
    pub sampling_measure: Coupling,
}

/// For each `N`, draw `m` pairs with `dt = T/N` and summarise `log RN`.
pub fn rn_degeneration_experiment(
    horizon: f64,
    n_list: &[usize],
    m: usize,
    measure: Coupling,
    seed: SeedSpec,
) -> Result<Vec<RnExperimentRow>> {
    if m < 2 {
        return Err(Error::invalid(format!("sample size must be >= 2, got {m}")));
    }
    n_list
        .iter()
        .map(|&n| {
            let dt = horizon / n as f64;
            let ratio = DiscreteRnRatio::new(n, dt)?;
            let base = seed.derive(n as u64);
            let values = par::try_map_indexed(m, |i| {
                let z = sample_walk_pair(n, dt, measure, base.with_stream(i as u64))?;
                ratio.log_rn(&z)
            })?;
            let (mean, se) = mean_and_se(&values);
            Ok(RnExperimentRow {
                n,
                delta_t: dt,
                mean_log_rn: mean,
                sd_log_rn: variance(&values).sqrt(),
                se_log_rn: se,
                sampling_measure: measure,
            })
        })
        .collect()
}

/// Least-squares slope of `mean_log_rn` against `N`.
pub fn degeneration_fit(rows: &[RnExperimentRow]) -> LinearFit {
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_log_rn).collect();
    linear_fit(&x, &y)
}

/// Monte Carlo `E_prod[exp(log RN)]` with its standard error (should be 1).
pub fn rn_normalization(n: usize, dt: f64, m: usize, seed: SeedSpec) -> Result<(f64, f64)> {
    let ratio = DiscreteRnRatio::new(n, dt)?;
    let values = par::try_map_indexed(m, |i| {
        let z = sample_walk_pair(n, dt, Coupling::Product, seed.with_stream(i as u64))?;
        ratio.log_rn(&z).map(f64::exp)
    })?;
    Ok(mean_and_se(&values))
}

/// `Q_n` over `[0, t]` with the continuum limit it targets under the joint
/// law.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariationStat {
    pub level: u32,
    pub t: f64,
    /// `d x n`.
    pub value: DMatrix<f64>,
    /// `int_0^t sigma1(s, x_s) ds`, trapezoidal along the stored signal path.
    pub target_joint: DMatrix<f64>,
}

fn grid_index(grid: &TimeGrid, t: f64) -> Result<usize> {
    grid.index_of(t)
        .ok_or_else(|| Error::invalid(format!("t = {t} is not a point of the level-{} grid", grid.level())))
}

/// `sum_{from <= i < to} (x_{i+1} - x_i)(y_{i+1} - y_i)^T` on the pair's grid.
pub fn covariation_sum(pair: &PathPair, from: usize, to: usize) -> DMatrix<f64> {
    covariation_sum_strided(pair, from, to, 1)
}

/// As [`covariation_sum`] on the sub-grid of every `stride`-th point;
/// `from` and `to` index that sub-grid.
fn covariation_sum_strided(pair: &PathPair, from: usize, to: usize, stride: usize) -> DMatrix<f64> {
    let (xv, yv) = (pair.x.values(), pair.y.values());
    let (d, n) = (xv.ncols(), yv.ncols());
    let mut q = DMatrix::zeros(d, n);
    for k in from..to {
        let (a, b) = (k * stride, (k + 1) * stride);
        for r in 0..d {
            let dx = xv[(b, r)] - xv[(a, r)];
            for c in 0..n {
                q[(r, c)] += dx * (yv[(b, c)] - yv[(a, c)]);
            }
        }
    }
    q
}

fn sigma1_integral<M: SignalObservationModel + ?Sized>(model: &M, pair: &PathPair, to: usize, stride: usize) -> DMatrix<f64> {
    let grid = pair.grid();
    let mut acc = DMatrix::zeros(model.signal_dim(), model.obs_dim());
    let eval = |k: usize| {
        let i = k * stride;
        model.sigma1(grid.times()[i], &pair.x.state(i))
    };
    let h = grid.dt() * stride as f64;
    let mut left = eval(0);
    for k in 0..to {
        let right = eval(k + 1);
        acc += (&left + &right) * (0.5 * h);
        left = right;
    }
    acc
}

/// `Q_n^{[0,t]}` at the pair's native level.
pub fn quadratic_covariation<M: SignalObservationModel + ?Sized>(
    pair: &PathPair,
    model: &M,
    t: f64,
) -> Result<CovariationStat> {
    let grid = pair.grid();
    let idx = grid_index(grid, t)?;
    Ok(CovariationStat {
        level: grid.level(),
        t,
        value: covariation_sum(pair, 0, idx),
        target_joint: sigma1_integral(model, pair, idx, 1),
    })
}

/// `Q` at a coarser dyadic level, from the points of the fine path.
pub fn quadratic_covariation_at_level<M: SignalObservationModel + ?Sized>(
    pair: &PathPair,
    model: &M,
    t: f64,
    level: u32,
) -> Result<CovariationStat> {
    let native = pair.grid().level();
    if level > native {
        return Err(Error::invalid(format!(
            "level {level} is finer than the path's level {native}"
        )));
    }
    let coarse = TimeGrid::dyadic(level, pair.grid().horizon())?;
    let idx = grid_index(&coarse, t)?;
    let stride = 1usize << (native - level);
    Ok(CovariationStat {
        level,
        t,
        value: covariation_sum_strided(pair, 0, idx, stride),
        target_joint: sigma1_integral(model, pair, idx, stride),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub level: u32,
    /// Mean Frobenius norm of `Q_n`.
    pub mean_norm: f64,
    /// Entrywise mean of `Q_n` and its standard error.
    pub mean: DMatrix<f64>,
    pub mean_se: DMatrix<f64>,
    /// Summed entrywise variance of `Q_n` and its standard error.
    pub variance: f64,
    pub variance_se: f64,
    /// Mean of `int sigma1 ds` over the ensemble.
    pub target_mean: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayStudy {
    pub coupling: Coupling,
    pub rows: Vec<DecayRow>,
    /// Fit of `log2(variance)` against level.
    pub log2_variance_fit: LinearFit,
}

/// Ensemble statistics of `Q_n^{[0,t]}` across `levels`. Each member is one
/// path at the finest level, observed on every coarser dyadic grid.
pub fn covariation_decay_study<M: SignalObservationModel + ?Sized>(
    model: &M,
    t: f64,
    levels: &[u32],
    m: usize,
    coupling: Coupling,
    seed: SeedSpec,
) -> Result<DecayStudy> {
    if levels.is_empty() || m < 2 {
        return Err(Error::invalid("decay study needs at least one level and two pairs"));
    }
    let finest = *levels.iter().max().expect("non-empty");
    let grid = Arc::new(TimeGrid::dyadic(finest, model.horizon())?);
    let stats = par::try_map_indexed(m, |i| -> Result<Vec<CovariationStat>> {
        let pair = simulate_pair(model, &grid, coupling, seed.with_stream(i as u64))?;
        levels
            .iter()
            .map(|&l| quadratic_covariation_at_level(&pair, model, t, l))
            .collect()
    })?;
    let (d, n) = (model.signal_dim(), model.obs_dim());
    let rows: Vec<DecayRow> = levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let mut mean = DMatrix::zeros(d, n);
            let mut mean_se = DMatrix::zeros(d, n);
            let mut total_var = 0.0;
            let mut var_se_sq = 0.0;
            for r in 0..d {
                for c in 0..n {
                    let v: Vec<f64> = stats.iter().map(|s| s[li].value[(r, c)]).collect();
                    let (mu, se) = mean_and_se(&v);
                    mean[(r, c)] = mu;
                    mean_se[(r, c)] = se;
                    total_var += variance(&v);
                    var_se_sq += variance_se(&v).powi(2);
                }
            }
            let mean_norm = stats.iter().map(|s| s[li].value.norm()).sum::<f64>() / m as f64;
            let target_mean = stats
                .iter()
                .fold(DMatrix::zeros(d, n), |acc, s| acc + &s[li].target_joint)
                / m as f64;
            DecayRow {
                level,
                mean_norm,
                mean,
                mean_se,
                variance: total_var,
                variance_se: var_se_sq.sqrt(),
                target_mean,
            }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.level as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.variance.log2()).collect();
    Ok(DecayStudy {
        coupling,
        log2_variance_fit: linear_fit(&x, &y),
        rows,
    })
}

/// Decide whether a pair looks jointly sampled: `Joint` when
/// `(1 - f) |Q - target| < f |Q|`, with `Q` and `target` over `[0, T]`.
/// `f = 0.5` is the midpoint rule (nearer to `int sigma1` than to 0).
pub fn classify_coupling<M: SignalObservationModel + ?Sized>(
    pair: &PathPair,
    model: &M,
    threshold_fraction: f64,
) -> Result<Coupling> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "threshold fraction must lie in (0, 1), got {threshold_fraction}"
        )));
    }
    let level = pair.grid().level();
    if level < MIN_CLASSIFIER_LEVEL {
        return Err(Error::invalid(format!(
            "classifier needs grid level >= {MIN_CLASSIFIER_LEVEL}, got {level}"
        )));
    }
    let stat = quadratic_covariation(pair, model, pair.grid().horizon())?;
    let target_norm = stat.target_joint.norm();
    if target_norm.is_nan() || target_norm < SEPARATION_FLOOR {
        return Err(Error::invalid(format!(
            "model violates separation: |int sigma1 ds| = {target_norm:e} along the signal path"
        )));
    }
    let to_joint = (&stat.value - &stat.target_joint).norm();
    let to_zero = stat.value.norm();
    Ok(if (1.0 - threshold_fraction) * to_joint < threshold_fraction * to_zero {
        Coupling::Joint
    } else {
        Coupling::Product
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationRates {
    pub level: u32,
    pub pairs: usize,
    pub joint_error_rate: f64,
    pub product_error_rate: f64,
}

/// Error rates of [`classify_coupling`] over labelled joint and product
/// ensembles of `pairs` members each.
pub fn classification_experiment<M: SignalObservationModel + ?Sized>(
    model: &M,
    level: u32,
    pairs: usize,
    threshold_fraction: f64,
    seed: SeedSpec,
) -> Result<ClassificationRates> {
    let grid = Arc::new(TimeGrid::dyadic(level, model.horizon())?);
    let rate = |coupling: Coupling, tag: u64| -> Result<f64> {
        let base = seed.derive(tag);
        let wrong = par::try_map_indexed(pairs, |i| -> Result<bool> {
            let pair = simulate_pair(model, &grid, coupling, base.with_stream(i as u64))?;
            Ok(classify_coupling(&pair, model, threshold_fraction)? != coupling)
        })?;
        Ok(wrong.iter().filter(|w| **w).count() as f64 / pairs as f64)
    };
    Ok(ClassificationRates {
        level,
        pairs,
        joint_error_rate: rate(Coupling::Joint, 10)?,
        product_error_rate: rate(Coupling::Product, 11)?,
    })
}

/// Realised quadratic variation of the stacked `(x, y)` per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct QvBlocks {
    /// `(d+n) x (d+n)`.
    pub estimate: DMatrix<f64>,
    /// Entrywise standard errors from the per-step products.
    pub standard_error: DMatrix<f64>,
    /// `[[S0 + S1 S1^T, S1], [S1^T, I]]`, off-diagonal blocks zeroed for
    /// product pairs.
    pub expected: DMatrix<f64>,
}

pub fn expected_qv_blocks(model: &LinearModel, coupling: Coupling) -> DMatrix<f64> {
    let (d, n) = (model.signal_dim(), model.obs_dim());
    let mut m = DMatrix::zeros(d + n, d + n);
    m.view_mut((0, 0), (d, d))
        .copy_from(&(model.private_covariance() + &model.sigma1 * model.sigma1.transpose()));
    m.view_mut((d, d), (n, n)).fill_with_identity();
    if coupling == Coupling::Joint {
        m.view_mut((0, d), (d, n)).copy_from(&model.sigma1);
        m.view_mut((d, 0), (n, d)).copy_from(&model.sigma1.transpose());
    }
    m
}

pub fn empirical_qv_blocks(pair: &PathPair, model: &LinearModel) -> Result<QvBlocks> {
    let (d, n) = (pair.x.dim(), pair.y.dim());
    if d != model.signal_dim() || n != model.obs_dim() {
        return Err(Error::invalid("pair dimensions do not match the model"));
    }
    let grid = pair.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let q = d + n;
    let inc = |i: usize| -> DVector<f64> {
        let mut z = DVector::zeros(q);
        z.rows_mut(0, d).copy_from(&pair.x.increment(i));
        z.rows_mut(d, n).copy_from(&pair.y.increment(i));
        z
    };
    let mut estimate = DMatrix::zeros(q, q);
    let mut second = DMatrix::zeros(q, q);
    for i in 0..steps {
        let z = inc(i);
        let p = &z * z.transpose() / dt;
        second += p.component_mul(&p);
        estimate += p;
    }
    let s = steps as f64;
    estimate /= s;
    second /= s;
    let standard_error = DMatrix::from_fn(q, q, |r, c| {
        let var = (second[(r, c)] - estimate[(r, c)].powi(2)) * s / (s - 1.0);
        (var.max(0.0) / s).sqrt()
    });
    let coupling = match pair.coupling {
        Coupling::Product => Coupling::Product,
        _ => Coupling::Joint,
    };
    Ok(QvBlocks {
        estimate,
        standard_error,
        expected: expected_qv_blocks(model, coupling),
    })
}
