//! Exact Gaussian ground truth for the linear Euler chain.
//!
//! The oracle targets the discrete chain the sampler simulates, not the
//! continuous-time law, so Monte Carlo comparisons against it carry no
//! discretisation bias.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{Block, GaussianLaw, Layout};
use crate::model::{LinearModel, Path, TimeGrid};

/// Finest grid level for dense trajectory laws.
pub const DENSE_LEVEL_CAP: u32 = 12;

pub(crate) fn check_dense_level(grid: &TimeGrid, what: &'static str) -> Result<()> {
    if grid.level() > DENSE_LEVEL_CAP {
        return Err(Error::GridCap {
            level: grid.level(),
            cap: DENSE_LEVEL_CAP,
            what,
        });
    }
    Ok(())
}

pub(crate) fn check_model_grid(model: &LinearModel, grid: &TimeGrid) -> Result<()> {
    model.validate().into_result()?;
    if model.horizon != grid.horizon() {
        return Err(Error::GridMismatch(format!(
            "model horizon {} differs from grid horizon {}",
            model.horizon,
            grid.horizon()
        )));
    }
    Ok(())
}

/// The same noise structure with every drift removed.
pub fn driftless(model: &LinearModel) -> LinearModel {
    let (d, n) = (model.signal_dim(), model.obs_dim());
    LinearModel {
        a: DMatrix::zeros(d, d),
        c: DMatrix::zeros(n, d),
        ..model.clone()
    }
}

/// Mean and covariance of `(x_1..x_N, y_1..y_N)` for the Euler chain
///
/// ```text
/// s_{i+1} = G s_i + e_i,  G = [[I + A dt, 0], [C dt, I]],
/// Cov(e_i) = dt [[S0 + S1 S1^T, S1], [S1^T, I]]
/// ```
/// with `S0 = sigma0 sigma0^T`, `S1 = sigma1`.
pub fn build_discrete_joint_law(model: &LinearModel, grid: &TimeGrid) -> Result<GaussianLaw> {
    check_model_grid(model, grid)?;
    check_dense_level(grid, "dense joint law")?;
    let (d, n) = (model.signal_dim(), model.obs_dim());
    let q = d + n;
    let steps = grid.steps();
    let dt = grid.dt();

    let mut g = DMatrix::identity(q, q);
    let mut top = g.view_mut((0, 0), (d, d));
    top += &model.a * dt;
    g.view_mut((d, 0), (n, d)).copy_from(&(&model.c * dt));
    let mut noise = DMatrix::zeros(q, q);
    noise
        .view_mut((0, 0), (d, d))
        .copy_from(&((model.private_covariance() + &model.sigma1 * model.sigma1.transpose()) * dt));
    noise.view_mut((0, d), (d, n)).copy_from(&(&model.sigma1 * dt));
    noise
        .view_mut((d, 0), (n, d))
        .copy_from(&(model.sigma1.transpose() * dt));
    noise
        .view_mut((d, d), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * dt));

    let layout = Layout {
        steps,
        signal_dim: d,
        obs_dim: n,
    };
    let m = layout.dim();
    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);

    let mut state_mean = DVector::zeros(q);
    state_mean.rows_mut(0, d).copy_from(&model.x0);
    let mut v = DMatrix::zeros(q, q);
    let place = |cov: &mut DMatrix<f64>, i: usize, j: usize, block: &DMatrix<f64>| {
        for (a, ba) in [(0, Block::Signal), (d, Block::Observation)] {
            let ra = if a == 0 { d } else { n };
            for (b, bb) in [(0, Block::Signal), (d, Block::Observation)] {
                let rb = if b == 0 { d } else { n };
                for k in 0..ra {
                    for l in 0..rb {
                        let r = layout.index(i, k, ba);
                        let c = layout.index(j, l, bb);
                        let val = block[(a + k, b + l)];
                        cov[(r, c)] = val;
                        cov[(c, r)] = val;
                    }
                }
            }
        }
    };
    for j in 1..=steps {
        state_mean = &g * &state_mean;
        v = &g * &v * g.transpose() + &noise;
        for k in 0..d {
            mean[layout.index(j, k, Block::Signal)] = state_mean[k];
        }
        for k in 0..n {
            mean[layout.index(j, k, Block::Observation)] = state_mean[d + k];
        }
        // Cov(s_i, s_j) = G^{i-j} V_j for i >= j.
        let mut block = v.clone();
        place(&mut cov, j, j, &block);
        for i in (j + 1)..=steps {
            block = &g * block;
            place(&mut cov, i, j, &block);
        }
    }
    GaussianLaw::new(mean, cov, layout)
}

/// Exact posterior of the signal trajectory given the observation
/// trajectory (Schur complement of the observation block).
pub fn condition_on_observations(law: &GaussianLaw, y: &Path) -> Result<GaussianLaw> {
    let layout = law.layout;
    if layout.obs_dim == 0 {
        return Err(Error::invalid("law has no observation block"));
    }
    if y.grid().steps() != layout.steps || y.dim() != layout.obs_dim {
        return Err(Error::GridMismatch(format!(
            "observation path ({} steps, dim {}) does not match law ({} steps, dim {})",
            y.grid().steps(),
            y.dim(),
            layout.steps,
            layout.obs_dim
        )));
    }
    let s = layout.signal_len();
    let m = layout.dim() - s;
    let yflat = DVector::from_fn(m, |r, _| {
        let i = r / layout.obs_dim + 1;
        let k = r % layout.obs_dim;
        y.values()[(i, k)]
    });
    let (mu_y, syy) = law.observation_block();
    let sxx = law.cov.view((0, 0), (s, s));
    let syx = law.cov.view((s, 0), (m, s)).into_owned();
    let ch = Cholesky::new(syy).ok_or_else(|| Error::numerical("degenerate observation law"))?;
    let l = ch.l();
    let k = l
        .solve_lower_triangular(&syx)
        .ok_or_else(|| Error::numerical("degenerate observation law"))?;
    let r = l
        .solve_lower_triangular(&(yflat - mu_y))
        .ok_or_else(|| Error::numerical("degenerate observation law"))?;
    let mean = law.mean.rows(0, s) + k.transpose() * r;
    let cov = sxx - k.transpose() * &k;
    GaussianLaw::new(
        mean,
        cov,
        Layout::signal_only(layout.steps, layout.signal_dim),
    )?
    .repair_psd()
}

/// Posterior of the signal trajectory under `model` given `y`.
pub fn posterior(model: &LinearModel, grid: &TimeGrid, y: &Path) -> Result<GaussianLaw> {
    condition_on_observations(&build_discrete_joint_law(model, grid)?, y)
}

/// `log p(y) - log p0(y)`: the Euler chain's observation density against
/// that of the driftless chain, both exact Gaussians.
pub fn exact_log_normalizer(model: &LinearModel, grid: &TimeGrid, y: &Path) -> Result<f64> {
    let flat = |law: &GaussianLaw| -> Result<f64> {
        let (mean, cov) = law.observation_block();
        let n = law.layout.obs_dim;
        let obs = GaussianLaw::new(mean, cov, Layout::signal_only(law.layout.steps, n))?;
        let z = DVector::from_fn(obs.dim(), |r, _| y.values()[(r / n + 1, r % n)]);
        obs.log_density(&z)
    };
    let truth = build_discrete_joint_law(model, grid)?;
    let reference = build_discrete_joint_law(&driftless(model), grid)?;
    Ok(flat(&truth)? - flat(&reference)?)
}

/// Filter means and covariances at every grid time, including `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrack {
    pub times: Vec<f64>,
    /// `(N+1) x d`.
    pub means: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
}

impl FilterTrack {
    pub fn terminal_mean(&self) -> DVector<f64> {
        self.means.row(self.means.nrows() - 1).transpose()
    }

    pub fn terminal_cov(&self) -> &DMatrix<f64> {
        self.covs.last().expect("filter track is never empty")
    }
}

/// Correlated-noise Kalman-Bucy filter, explicit Euler in time:
///
/// ```text
/// K  = P C^T + sigma1
/// m' = m + A m dt + K (dy - C m dt)
/// P' = P + (A P + P A^T + S0 + sigma1 sigma1^T - K K^T) dt
/// ```
///
/// This is a first-order discretisation of the continuous filter, not the
/// exact filter of the Euler chain; its terminal moments approach the Schur
/// posterior at rate `O(dt)`. O(N) memory, so any grid level is allowed.
pub fn kalman_correlated(model: &LinearModel, grid: &Arc<TimeGrid>, y: &Path) -> Result<FilterTrack> {
    check_model_grid(model, grid)?;
    if !y.grid().same_as(grid) || y.dim() != model.obs_dim() {
        return Err(Error::GridMismatch(
            "observation path does not match the grid or model".into(),
        ));
    }
    let d = model.signal_dim();
    let dt = grid.dt();
    let s0 = model.private_covariance();
    let s1 = &model.sigma1;
    let process = &s0 + s1 * s1.transpose();
    let mut m = model.x0.clone();
    let mut p = DMatrix::zeros(d, d);
    let mut means = DMatrix::zeros(grid.len(), d);
    let mut covs = Vec::with_capacity(grid.len());
    means.row_mut(0).copy_from(&m.transpose());
    covs.push(p.clone());
    for i in 0..grid.steps() {
        let dy = y.increment(i);
        let gain = &p * model.c.transpose() + s1;
        let innovation = dy - &model.c * &m * dt;
        let m_next = &m + &model.a * &m * dt + &gain * innovation;
        let dp = &model.a * &p + &p * model.a.transpose() + &process - &gain * gain.transpose();
        let p_next = &p + dp * dt;
        m = m_next;
        p = (&p_next + p_next.transpose()) * 0.5;
        means.row_mut(i + 1).copy_from(&m.transpose());
        covs.push(p.clone());
    }
    Ok(FilterTrack {
        times: grid.times().to_vec(),
        means,
        covs,
    })
}
