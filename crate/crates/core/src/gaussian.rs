//! Finite-dimensional Gaussian laws over flattened grid trajectories.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

/// Relative symmetry tolerance.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative eigenvalue floor: anything in `(-floor * lambda_max, 0)` is roundoff.
pub const PSD_JITTER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Signal,
    Observation,
}

/// Flat-index layout: the signal block `x_1..x_N` (time-major, `d` per
/// time), then the observation block `y_1..y_N` (`n` per time). Time index
/// 0 is excluded, because `x_0` and `y_0` are deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub steps: usize,
    pub signal_dim: usize,
    /// 0 for a signal-only law.
    pub obs_dim: usize,
}

impl Layout {
    pub fn signal_only(steps: usize, signal_dim: usize) -> Self {
        Self {
            steps,
            signal_dim,
            obs_dim: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.steps * (self.signal_dim + self.obs_dim)
    }

    pub fn signal_len(&self) -> usize {
        self.steps * self.signal_dim
    }

    /// Flat index of coordinate `k` at grid time index `i` (`1..=steps`).
    pub fn index(&self, i: usize, k: usize, block: Block) -> usize {
        debug_assert!(i >= 1 && i <= self.steps);
        match block {
            Block::Signal => (i - 1) * self.signal_dim + k,
            Block::Observation => self.signal_len() + (i - 1) * self.obs_dim + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub layout: Layout,
}

fn max_abs_diag(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

impl GaussianLaw {
    /// Checks shapes and symmetry; symmetrises the covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, layout: Layout) -> Result<Self> {
        let m = mean.len();
        if cov.shape() != (m, m) || layout.dim() != m {
            return Err(Error::invalid(format!(
                "Gaussian law: mean length {m}, covariance {:?}, layout dimension {}",
                cov.shape(),
                layout.dim()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("Gaussian law has non-finite entries"));
        }
        let scale = max_abs_diag(&cov).max(f64::MIN_POSITIVE);
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * scale * 1e3 {
            return Err(Error::numerical(format!(
                "covariance not symmetric: max asymmetry {asym:e} at scale {scale:e}"
            )));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, layout })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Clamp roundoff-level negative eigenvalues to zero; fail on anything
    /// more negative than the jitter floor.
    pub fn repair_psd(mut self) -> Result<Self> {
        let m = self.dim();
        if m == 0 {
            return Ok(self);
        }
        if Cholesky::new(self.cov.clone()).is_some() {
            return Ok(self);
        }
        let eig = self.cov.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if lmin < -PSD_JITTER_FLOOR * lmax.max(0.0) {
            return Err(Error::numerical(format!(
                "covariance not PSD: smallest eigenvalue {lmin:e}, largest {lmax:e}"
            )));
        }
        let clamped = eig.eigenvalues.map(|v| v.max(0.0));
        let q = &eig.eigenvectors;
        let cov = q * DMatrix::from_diagonal(&clamped) * q.transpose();
        self.cov = (&cov + cov.transpose()) * 0.5;
        Ok(self)
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.cov.clone())
            .ok_or_else(|| Error::numerical("covariance is not positive definite"))
    }

    /// Lower factor `L` with `L L^T = cov`. PSD-singular covariances get a
    /// jitter of `PSD_JITTER_FLOOR * max diag`.
    pub fn sampling_factor(&self) -> Result<DMatrix<f64>> {
        if let Some(ch) = Cholesky::new(self.cov.clone()) {
            return Ok(ch.l());
        }
        let m = self.dim();
        let jitter = PSD_JITTER_FLOOR * max_abs_diag(&self.cov).max(f64::MIN_POSITIVE);
        Cholesky::new(&self.cov + DMatrix::identity(m, m) * jitter)
            .map(|c| c.l())
            .ok_or_else(|| Error::numerical("cannot factor candidate covariance for sampling"))
    }

    /// One exact draw, `mean + L z`.
    pub fn sample_with(&self, factor: &DMatrix<f64>, seed: SeedSpec) -> DVector<f64> {
        let mut rng = seed.rng();
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + factor * z
    }

    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        let ch = self.cholesky()?;
        let r = z - &self.mean;
        let sol = ch.l().solve_lower_triangular(&r).ok_or_else(|| {
            Error::numerical("triangular solve failed in Gaussian log density")
        })?;
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let m = self.dim() as f64;
        Ok(-0.5 * (sol.norm_squared() + logdet + m * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Mean and covariance of the signal coordinates at grid time `i >= 1`.
    pub fn signal_marginal(&self, i: usize) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.layout.signal_dim;
        let start = self.layout.index(i, 0, Block::Signal);
        (
            self.mean.rows(start, d).into_owned(),
            self.cov.view((start, start), (d, d)).into_owned(),
        )
    }

    /// The signal block as a signal-only law.
    pub fn signal_law(&self) -> GaussianLaw {
        let s = self.layout.signal_len();
        GaussianLaw {
            mean: self.mean.rows(0, s).into_owned(),
            cov: self.cov.view((0, 0), (s, s)).into_owned(),
            layout: Layout::signal_only(self.layout.steps, self.layout.signal_dim),
        }
    }

    /// Mean and covariance of the observation block.
    pub fn observation_block(&self) -> (DVector<f64>, DMatrix<f64>) {
        let s = self.layout.signal_len();
        let m = self.dim() - s;
        (
            self.mean.rows(s, m).into_owned(),
            self.cov.view((s, s), (m, m)).into_owned(),
        )
    }
}

/// Closed-form `KL(p || q)` between Gaussians of equal dimension.
/// Infinite when `p` is degenerate; an error when `q` is.
pub fn kl_divergence(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "KL between laws of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let k = p.dim() as f64;
    let qch = Cholesky::new(q.cov.clone())
        .ok_or_else(|| Error::numerical("KL reference covariance is singular"))?;
    let pch = match Cholesky::new(p.cov.clone()) {
        Some(c) => c,
        None => return Ok(f64::INFINITY),
    };
    let logdet = |l: DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ql = qch.l();
    let dm = &q.mean - &p.mean;
    let mahal = ql
        .solve_lower_triangular(&dm)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?
        .norm_squared();
    // tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    let trace = ql
        .solve_lower_triangular(&pch.l())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?
        .norm_squared();
    let kl = 0.5 * (trace + mahal - k + logdet(ql) - logdet(pch.l()));
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(mean: f64, var: f64) -> GaussianLaw {
        GaussianLaw::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
            Layout::signal_only(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn layout_indices() {
        let l = Layout {
            steps: 3,
            signal_dim: 2,
            obs_dim: 1,
        };
        assert_eq!(l.dim(), 9);
        assert_eq!(l.index(1, 0, Block::Signal), 0);
        assert_eq!(l.index(3, 1, Block::Signal), 5);
        assert_eq!(l.index(1, 0, Block::Observation), 6);
        assert_eq!(l.index(3, 0, Block::Observation), 8);
    }

    #[test]
    fn rejects_asymmetric() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianLaw::new(DVector::zeros(2), cov, Layout::signal_only(2, 1)).is_err());
    }

    #[test]
    fn psd_repair_clamps_roundoff_only() {
        let l = Layout::signal_only(2, 1);
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-13]);
        let law = GaussianLaw::new(DVector::zeros(2), tiny, l).unwrap().repair_psd().unwrap();
        let eig = law.cov.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(GaussianLaw::new(DVector::zeros(2), bad, l).unwrap().repair_psd().is_err());
    }

    #[test]
    fn kl_basics() {
        assert!(kl_divergence(&scalar(0.0, 1.0), &scalar(0.0, 1.0)).unwrap().abs() < 1e-14);
        assert!((kl_divergence(&scalar(1.0, 1.0), &scalar(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-14);
        // 1-D closed form: 0.5 (s1/s2 + (m2-m1)^2/s2 - 1 + ln(s2/s1))
        let v = kl_divergence(&scalar(0.3, 2.0), &scalar(-0.2, 0.5)).unwrap();
        let expected = 0.5 * (4.0 + 0.25 / 0.5 - 1.0 + (0.25f64).ln());
        assert!((v - expected).abs() < 1e-13);
        assert_eq!(kl_divergence(&scalar(0.0, 0.0), &scalar(0.0, 1.0)).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&scalar(0.0, 1.0), &scalar(0.0, 0.0)).is_err());
    }

    #[test]
    fn log_density_standard_normal() {
        let v = scalar(0.0, 1.0).log_density(&DVector::from_element(1, 1.0)).unwrap();
        let expected = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expected).abs() < 1e-14);
    }
}
