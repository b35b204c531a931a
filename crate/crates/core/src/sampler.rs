//! Euler-Maruyama path simulation under the joint law, the product law and
//! the conditional reference law `mu_y`.
//!
//! Coefficients are evaluated at the left endpoint of each step (Itô). The
//! increments of one path come from one counter-based stream, so a path is a
//! pure function of `(model, grid, seed)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Coupling, LinearModel, Path, PathPair, SignalObservationModel, TimeGrid};
use crate::rng::SeedSpec;

const INITIAL_STATE_TAG: u64 = 0x1417;
const PRODUCT_SIGNAL_TAG: u64 = 1;
const PRODUCT_OBSERVATION_TAG: u64 = 2;

/// Brownian increments for one path: row `i` is the increment over
/// `[t_i, t_{i+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    /// Private signal noise, `steps x d`.
    pub db: DMatrix<f64>,
    /// Shared noise, `steps x n`.
    pub dw: DMatrix<f64>,
}

/// Per step: `d` draws for `dB`, then `n` draws for `dW`, each `N(0, dt)`.
pub fn draw_increments(seed: SeedSpec, grid: &TimeGrid, d: usize, n: usize) -> Increments {
    let steps = grid.steps();
    let sd = grid.dt().sqrt();
    let mut rng = seed.rng();
    let mut db = DMatrix::zeros(steps, d);
    let mut dw = DMatrix::zeros(steps, n);
    for i in 0..steps {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            db[(i, k)] = sd * z;
        }
        for k in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            dw[(i, k)] = sd * z;
        }
    }
    Increments { db, dw }
}

fn check_horizon<M: SignalObservationModel + ?Sized>(model: &M, grid: &TimeGrid) -> Result<()> {
    if model.horizon() != grid.horizon() {
        return Err(Error::GridMismatch(format!(
            "model horizon {} differs from grid horizon {}",
            model.horizon(),
            grid.horizon()
        )));
    }
    Ok(())
}

/// Run the coupled Euler chain driven by the given increments.
pub fn simulate_with_increments<M: SignalObservationModel + ?Sized>(
    model: &M,
    grid: &Arc<TimeGrid>,
    x0: DVector<f64>,
    inc: &Increments,
) -> Result<PathPair> {
    check_horizon(model, grid)?;
    let (d, n) = (model.signal_dim(), model.obs_dim());
    if x0.len() != d {
        return Err(Error::invalid(format!(
            "initial state has length {}, model signal dimension is {d}",
            x0.len()
        )));
    }
    let steps = grid.steps();
    if inc.db.shape() != (steps, d) || inc.dw.shape() != (steps, n) {
        return Err(Error::GridMismatch("increment table does not match the grid".into()));
    }
    let dt = grid.dt();
    let mut xs = DMatrix::zeros(steps + 1, d);
    let mut ys = DMatrix::zeros(steps + 1, n);
    let mut x = x0;
    let mut y = DVector::zeros(n);
    xs.row_mut(0).copy_from(&x.transpose());
    for i in 0..steps {
        let t = grid.times()[i];
        let db = inc.db.row(i).transpose();
        let dw = inc.dw.row(i).transpose();
        let x_next = &x
            + model.drift(t, &x) * dt
            + model.sigma0(t, &x) * &db
            + model.sigma1(t, &x) * &dw;
        let y_next = &y + model.observation(&x) * dt + &dw;
        if x_next.iter().chain(y_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite state at step {i} (t = {t})"
            )));
        }
        x = x_next;
        y = y_next;
        xs.row_mut(i + 1).copy_from(&x.transpose());
        ys.row_mut(i + 1).copy_from(&y.transpose());
    }
    PathPair::new(
        Path::new(grid.clone(), xs)?,
        Path::new(grid.clone(), ys)?,
        Coupling::Joint,
    )
}

/// One draw of the coupled pair, with the same `dW` entering signal and
/// observation.
pub fn simulate_joint<M: SignalObservationModel + ?Sized>(
    model: &M,
    grid: &Arc<TimeGrid>,
    seed: SeedSpec,
) -> Result<PathPair> {
    let x0 = model.initial_state(seed.derive(INITIAL_STATE_TAG));
    let inc = draw_increments(seed, grid, model.signal_dim(), model.obs_dim());
    simulate_with_increments(model, grid, x0, &inc)
}

/// Signal from one joint draw, observation from an independent joint draw:
/// both marginals are exact and the coupling is gone.
pub fn simulate_product<M: SignalObservationModel + ?Sized>(
    model: &M,
    grid: &Arc<TimeGrid>,
    seed: SeedSpec,
) -> Result<PathPair> {
    let (sx, sy) = product_seeds(seed);
    let first = simulate_joint(model, grid, sx)?;
    let second = simulate_joint(model, grid, sy)?;
    PathPair::new(first.x, second.y, Coupling::Product)
}

/// The two joint-draw seeds behind [`simulate_product`].
pub fn product_seeds(seed: SeedSpec) -> (SeedSpec, SeedSpec) {
    (seed.derive(PRODUCT_SIGNAL_TAG), seed.derive(PRODUCT_OBSERVATION_TAG))
}

/// Draw under the given coupling (`Reference` is not a pair law).
pub fn simulate_pair<M: SignalObservationModel + ?Sized>(
    model: &M,
    grid: &Arc<TimeGrid>,
    coupling: Coupling,
    seed: SeedSpec,
) -> Result<PathPair> {
    match coupling {
        Coupling::Joint => simulate_joint(model, grid, seed),
        Coupling::Product => simulate_product(model, grid, seed),
        Coupling::Reference => Err(Error::invalid(
            "reference coupling is a conditional signal law; use sample_reference",
        )),
    }
}

/// Signal path under `mu_y`: `x_i = x0 + sigma0 (sum_{j<i} dB_j) + sigma1 y_i`.
pub fn sample_reference(
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    seed: SeedSpec,
) -> Result<Path> {
    if !y.grid().same_as(grid) {
        return Err(Error::GridMismatch(
            "observation path is not on the requested grid".into(),
        ));
    }
    if y.dim() != model.obs_dim() {
        return Err(Error::invalid(format!(
            "observation has dimension {}, model expects {}",
            y.dim(),
            model.obs_dim()
        )));
    }
    if y.values().row(0).iter().any(|v| *v != 0.0) {
        return Err(Error::invalid("observation path must start at 0"));
    }
    let d = model.signal_dim();
    let sd = grid.dt().sqrt();
    let mut rng = seed.rng();
    let mut bm = DVector::zeros(d);
    let mut xs = DMatrix::zeros(grid.len(), d);
    for i in 0..grid.len() {
        if i > 0 {
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                bm[k] += sd * z;
            }
        }
        let xi = &model.x0 + &model.sigma0 * &bm + &model.sigma1 * y.state(i);
        xs.row_mut(i).copy_from(&xi.transpose());
    }
    Path::new(grid.clone(), xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_dyadic_grid, NonlinearModel};

    fn grid(level: u32, t: f64) -> Arc<TimeGrid> {
        Arc::new(make_dyadic_grid(level, t).unwrap())
    }

    fn pure_shared_noise() -> NonlinearModel {
        NonlinearModel {
            signal_dim: 1,
            obs_dim: 1,
            b: Arc::new(|_, x| x * 0.0),
            h: Arc::new(|x| x * 0.0),
            sigma0: Arc::new(|_, _| DMatrix::zeros(1, 1)),
            sigma1: Arc::new(|_, _| DMatrix::identity(1, 1)),
            x0_sampler: Arc::new(|_| DVector::from_element(1, 0.7)),
            horizon: 1.0,
            growth_bound: 2.0,
        }
    }

    #[test]
    fn shared_noise_fully_visible() {
        let g = grid(6, 1.0);
        let pair = simulate_joint(&pure_shared_noise(), &g, SeedSpec::new(3, 9)).unwrap();
        for i in 0..g.len() {
            let lhs = pair.x.values()[(i, 0)] - pair.x.values()[(0, 0)];
            assert!((lhs - pair.y.values()[(i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn joint_is_deterministic() {
        let g = grid(5, 1.0);
        let m = LinearModel::benchmark();
        let a = simulate_joint(&m, &g, SeedSpec::new(11, 4)).unwrap();
        let b = simulate_joint(&m, &g, SeedSpec::new(11, 4)).unwrap();
        assert_eq!(a, b);
        let c = simulate_joint(&m, &g, SeedSpec::new(11, 5)).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn shared_increments_enter_both_equations() {
        let g = grid(5, 1.0);
        let m = LinearModel::benchmark();
        let seed = SeedSpec::new(5, 1);
        let pair = simulate_joint(&m, &g, seed).unwrap();
        let inc = draw_increments(seed, &g, 1, 1);
        let dt = g.dt();
        for i in 0..g.steps() {
            let x = pair.x.values()[(i, 0)];
            let dy = pair.y.values()[(i + 1, 0)] - pair.y.values()[(i, 0)];
            let dx = pair.x.values()[(i + 1, 0)] - x;
            let dw_from_y = dy - x * dt;
            assert!((dw_from_y - inc.dw[(i, 0)]).abs() < 1e-14);
            let dw_from_x = (dx + x * dt - inc.db[(i, 0)]) / 0.5;
            assert!((dw_from_x - inc.dw[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn product_is_built_from_two_joint_draws() {
        let g = grid(5, 1.0);
        let m = LinearModel::benchmark();
        let seed = SeedSpec::new(21, 2);
        let p = simulate_product(&m, &g, seed).unwrap();
        let (s1, s2) = product_seeds(seed);
        assert_eq!(p.x, simulate_joint(&m, &g, s1).unwrap().x);
        assert_eq!(p.y, simulate_joint(&m, &g, s2).unwrap().y);
        assert_eq!(p.coupling, Coupling::Product);
    }

    #[test]
    fn overflow_reports_step() {
        let m = LinearModel::scalar(1e200, 0.0, 1.0, 0.0, 1.0, 1.0);
        let err = simulate_joint(&m, &grid(4, 1.0), SeedSpec::new(1, 1)).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("step"));
    }

    #[test]
    fn horizon_mismatch() {
        let m = LinearModel::benchmark();
        assert!(simulate_joint(&m, &grid(4, 2.0), SeedSpec::new(1, 1)).is_err());
    }

    #[test]
    fn reference_without_coupling_ignores_y() {
        let g = grid(5, 1.0);
        let m = LinearModel::scalar(-1.0, 1.0, 1.0, 0.0, 0.3, 1.0);
        let y1 = simulate_joint(&m, &g, SeedSpec::new(1, 1)).unwrap().y;
        let y2 = simulate_joint(&m, &g, SeedSpec::new(1, 2)).unwrap().y;
        let seed = SeedSpec::new(8, 8);
        let a = sample_reference(&m, &g, &y1, seed).unwrap();
        let b = sample_reference(&m, &g, &y2, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values()[(0, 0)], 0.3);
    }

    #[test]
    fn reference_with_zero_sigma0_is_deterministic_map() {
        let g = grid(5, 1.0);
        let m = LinearModel::scalar(0.0, 0.0, 0.0, 1.0, 0.4, 1.0);
        let y = simulate_joint(&LinearModel::benchmark(), &g, SeedSpec::new(2, 2))
            .unwrap()
            .y;
        let x = sample_reference(&m, &g, &y, SeedSpec::new(3, 3)).unwrap();
        for i in 0..g.len() {
            assert_eq!(x.values()[(i, 0)], 0.4 + y.values()[(i, 0)]);
        }
    }

    #[test]
    fn reference_rejects_foreign_grid() {
        let m = LinearModel::benchmark();
        let y = simulate_joint(&m, &grid(4, 1.0), SeedSpec::new(2, 2)).unwrap().y;
        assert!(sample_reference(&m, &grid(5, 1.0), &y, SeedSpec::new(1, 1)).is_err());
    }
}
