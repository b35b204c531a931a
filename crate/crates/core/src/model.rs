//! Model specifications, dyadic time grids and sampled paths.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

/// Finest supported grid level.
pub const MAX_GRID_LEVEL: u32 = 24;

/// Relative singular-value floor below which `sigma0` counts as singular.
pub const SIGMA0_CONDITION_FLOOR: f64 = 1e-10;

/// Equispaced dyadic partition of `[0, T]` with `2^level` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    level: u32,
    horizon: f64,
    times: Vec<f64>,
}

pub fn make_dyadic_grid(level: u32, horizon: f64) -> Result<TimeGrid> {
    TimeGrid::dyadic(level, horizon)
}

impl TimeGrid {
    pub fn dyadic(level: u32, horizon: f64) -> Result<Self> {
        if level > MAX_GRID_LEVEL {
            return Err(Error::GridCap {
                level,
                cap: MAX_GRID_LEVEL,
                what: "time grid",
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        let steps = 1usize << level;
        let denom = steps as f64;
        // i*T/2^n: the division is exact, so coarse points are bit-identical
        // to the even points of every refinement.
        let times = (0..=steps).map(|i| (i as f64 * horizon) / denom).collect();
        Ok(Self {
            level,
            horizon,
            times,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps, `2^level`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Index of `t` if it is (bit-exactly, or within 1e-12 relative) a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = t / self.dt();
        let i = pos.round();
        if i < 0.0 || i > self.steps() as f64 {
            return None;
        }
        let i = i as usize;
        ((self.times[i] - t).abs() <= 1e-12 * self.horizon.max(1.0)).then_some(i)
    }

    pub fn refine(&self) -> Result<Self> {
        Self::dyadic(self.level + 1, self.horizon)
    }

    /// Same horizon and level.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.level == other.level && self.horizon == other.horizon
    }
}

/// A discretised trajectory: one row per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: Arc<TimeGrid>,
    values: DMatrix<f64>,
}

impl Path {
    pub fn new(grid: Arc<TimeGrid>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "path has {} rows, grid has {} points",
                values.nrows(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite path entry at flat index {pos}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn increment(&self, i: usize) -> DVector<f64> {
        (self.values.row(i + 1) - self.values.row(i)).transpose()
    }

    pub fn terminal(&self) -> DVector<f64> {
        self.state(self.grid.steps())
    }

    /// Every `2^(level - new_level)`-th point, i.e. the same path observed on
    /// a coarser dyadic grid.
    pub fn coarsen(&self, level: u32) -> Result<Path> {
        if level > self.grid.level() {
            return Err(Error::invalid(format!(
                "cannot coarsen level {} to finer level {level}",
                self.grid.level()
            )));
        }
        let grid = Arc::new(TimeGrid::dyadic(level, self.grid.horizon())?);
        let stride = 1usize << (self.grid.level() - level);
        let values = DMatrix::from_fn(grid.len(), self.dim(), |i, k| self.values[(i * stride, k)]);
        Ok(Path { grid, values })
    }

    pub fn scaled(&self, factor: f64) -> Path {
        Path {
            grid: self.grid.clone(),
            values: &self.values * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coupling {
    Joint,
    Product,
    Reference,
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coupling::Joint => "joint",
            Coupling::Product => "product",
            Coupling::Reference => "reference",
        })
    }
}

/// Signal path `x` with observation path `y` on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    pub x: Path,
    pub y: Path,
    pub coupling: Coupling,
}

impl PathPair {
    pub fn new(x: Path, y: Path, coupling: Coupling) -> Result<Self> {
        if !x.grid().same_as(y.grid()) {
            return Err(Error::GridMismatch("signal and observation grids differ".into()));
        }
        if y.values().row(0).iter().any(|v| *v != 0.0) {
            return Err(Error::invalid("observation path must start at 0"));
        }
        Ok(Self { x, y, coupling })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        self.x.grid()
    }
}

/// Coefficients of a signal/observation pair
///
/// ```text
/// dX = b(t, X) dt + sigma0(t, X) dB + sigma1(t, X) dW,   X_0 ~ mu
/// dY = h(X) dt + dW,                                      Y_0 = 0
/// ```
pub trait SignalObservationModel: Sync {
    fn signal_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
    fn observation(&self, x: &DVector<f64>) -> DVector<f64>;
    fn sigma0(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
    fn sigma1(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
    fn initial_state(&self, seed: SeedSpec) -> DVector<f64>;
}

/// Constant-coefficient linear model with deterministic initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    DimensionMismatch(String),
    Sigma0Singular { smallest: f64, largest: f64 },
    NonFinite(String),
    NonPositiveHorizon(f64),
    GrowthBoundExceeded { at: String, ratio: f64 },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            ValidationIssue::Sigma0Singular { smallest, largest } => write!(
                f,
                "sigma0 singular: smallest singular value {smallest:e} vs largest {largest:e} \
                 (floor {SIGMA0_CONDITION_FLOOR:e} relative)"
            ),
            ValidationIssue::NonFinite(what) => write!(f, "non-finite coefficient: {what}"),
            ValidationIssue::NonPositiveHorizon(t) => write!(f, "horizon must be > 0, got {t}"),
            ValidationIssue::GrowthBoundExceeded { at, ratio } => write!(
                f,
                "growth bound exceeded at {at}: coefficient norm / (1+|x|) / bound = {ratio:.3}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }

    pub fn has_singular_sigma0(&self) -> bool {
        self.issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::Sigma0Singular { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return f.write_str("ok");
        }
        for (k, issue) in self.issues.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        sigma0: DMatrix<f64>,
        sigma1: DMatrix<f64>,
        x0: DVector<f64>,
        horizon: f64,
    ) -> Self {
        Self {
            a,
            c,
            sigma0,
            sigma1,
            x0,
            horizon,
        }
    }

    /// One-dimensional signal and observation.
    pub fn scalar(a: f64, c: f64, sigma0: f64, sigma1: f64, x0: f64, horizon: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(c), m(sigma0), m(sigma1), DVector::from_element(1, x0), horizon)
    }

    /// a=-1, c=1, sigma0=1, sigma1=0.5, x0=1, T=1.
    pub fn benchmark() -> Self {
        Self::scalar(-1.0, 1.0, 1.0, 0.5, 1.0, 1.0)
    }

    pub fn signal_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Drift gap `A - sigma1 C` between the conditioned signal and `mu_y`.
    pub fn drift_gap(&self) -> DMatrix<f64> {
        &self.a - &self.sigma1 * &self.c
    }

    /// `sigma0 sigma0^T`.
    pub fn private_covariance(&self) -> DMatrix<f64> {
        &self.sigma0 * self.sigma0.transpose()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let d = self.a.nrows();
        let mut dims_ok = true;
        let mut mismatch = |what: String| {
            issues.push(ValidationIssue::DimensionMismatch(what));
        };
        if self.a.ncols() != d {
            dims_ok = false;
            mismatch(format!("A is {}x{}, expected square", d, self.a.ncols()));
        }
        if self.c.ncols() != d {
            dims_ok = false;
            mismatch(format!(
                "C is {}x{}, expected {}x{d}",
                self.c.nrows(),
                self.c.ncols(),
                self.c.nrows()
            ));
        }
        let n = self.c.nrows();
        if self.sigma0.shape() != (d, d) {
            dims_ok = false;
            mismatch(format!(
                "sigma0 is {}x{}, expected {d}x{d}",
                self.sigma0.nrows(),
                self.sigma0.ncols()
            ));
        }
        if self.sigma1.shape() != (d, n) {
            dims_ok = false;
            mismatch(format!(
                "sigma1 is {}x{}, expected {d}x{n}",
                self.sigma1.nrows(),
                self.sigma1.ncols()
            ));
        }
        if self.x0.len() != d {
            dims_ok = false;
            mismatch(format!("x0 has length {}, expected {d}", self.x0.len()));
        }
        if d == 0 || n == 0 {
            dims_ok = false;
            mismatch("signal and observation dimensions must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            issues.push(ValidationIssue::NonPositiveHorizon(self.horizon));
        }
        for (name, m) in [
            ("A", &self.a),
            ("C", &self.c),
            ("sigma0", &self.sigma0),
            ("sigma1", &self.sigma1),
        ] {
            if m.iter().any(|v| !v.is_finite()) {
                issues.push(ValidationIssue::NonFinite(name.into()));
            }
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::NonFinite("x0".into()));
        }
        if dims_ok && self.sigma0.iter().all(|v| v.is_finite()) {
            let sv = self.sigma0.clone().singular_values();
            let largest = sv.max();
            let smallest = sv.min();
            if smallest.is_nan() || smallest <= SIGMA0_CONDITION_FLOOR * largest {
                issues.push(ValidationIssue::Sigma0Singular { smallest, largest });
            }
        }
        ValidationReport { issues }
    }

    /// Stable content hash, used to tag golden files and output headers.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut text = String::new();
        for (name, m) in [
            ("A", &self.a),
            ("C", &self.c),
            ("sigma0", &self.sigma0),
            ("sigma1", &self.sigma1),
        ] {
            text.push_str(&format!("{name}:{}x{}:", m.nrows(), m.ncols()));
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    text.push_str(&format!("{:.16e},", m[(i, j)]));
                }
            }
        }
        text.push_str("x0:");
        for v in self.x0.iter() {
            text.push_str(&format!("{v:.16e},"));
        }
        text.push_str(&format!("T:{:.16e}", self.horizon));
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl SignalObservationModel for LinearModel {
    fn signal_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn observation(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn sigma0(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sigma0.clone()
    }

    fn sigma1(&self, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sigma1.clone()
    }

    fn initial_state(&self, _seed: SeedSpec) -> DVector<f64> {
        self.x0.clone()
    }
}

pub type DriftFn = dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type ObservationFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type LoadingFn = dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync;
pub type InitialSampler = dyn Fn(&mut dyn RngCore) -> DVector<f64> + Send + Sync;

/// General state-dependent model. Coefficients are user closures; the
/// linear-growth constant is declared, and [`NonlinearModel::validate`]
/// spot-checks it.
#[derive(Clone)]
pub struct NonlinearModel {
    pub signal_dim: usize,
    pub obs_dim: usize,
    pub b: Arc<DriftFn>,
    pub h: Arc<ObservationFn>,
    pub sigma0: Arc<LoadingFn>,
    pub sigma1: Arc<LoadingFn>,
    pub x0_sampler: Arc<InitialSampler>,
    pub horizon: f64,
    pub growth_bound: f64,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("signal_dim", &self.signal_dim)
            .field("obs_dim", &self.obs_dim)
            .field("horizon", &self.horizon)
            .field("growth_bound", &self.growth_bound)
            .finish_non_exhaustive()
    }
}

impl NonlinearModel {
    /// Evaluate the coefficients at `samples` seeded random points and check
    /// finiteness, shapes and `|b|+|h|+|sigma0|+|sigma1| <= K (1+|x|)`.
    pub fn validate(&self, samples: usize, seed: SeedSpec) -> ValidationReport {
        let mut issues = Vec::new();
        let (d, n) = (self.signal_dim, self.obs_dim);
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            issues.push(ValidationIssue::NonPositiveHorizon(self.horizon));
        }
        let mut rng = seed.rng();
        for k in 0..samples {
            let scale = 10f64.powi((k % 4) as i32);
            let x = DVector::from_fn(d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            let t = self.horizon * ((k as f64 + 0.5) / samples.max(1) as f64);
            let b = (self.b)(t, &x);
            let h = (self.h)(&x);
            let s0 = (self.sigma0)(t, &x);
            let s1 = (self.sigma1)(t, &x);
            if b.len() != d || h.len() != n || s0.shape() != (d, d) || s1.shape() != (d, n) {
                issues.push(ValidationIssue::DimensionMismatch(format!(
                    "coefficient shapes at sample {k}: b {}, h {}, sigma0 {:?}, sigma1 {:?}",
                    b.len(),
                    h.len(),
                    s0.shape(),
                    s1.shape()
                )));
                break;
            }
            let total = b.norm() + h.norm() + s0.norm() + s1.norm();
            if !total.is_finite() {
                issues.push(ValidationIssue::NonFinite(format!("coefficients at sample {k}")));
                break;
            }
            let ratio = total / (self.growth_bound * (1.0 + x.norm()));
            if ratio > 1.0 {
                issues.push(ValidationIssue::GrowthBoundExceeded {
                    at: format!("t={t:.4}, |x|={:.4e}", x.norm()),
                    ratio,
                });
                break;
            }
        }
        ValidationReport { issues }
    }
}

impl SignalObservationModel for NonlinearModel {
    fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.b)(t, x)
    }

    fn observation(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    fn sigma0(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.sigma0)(t, x)
    }

    fn sigma1(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.sigma1)(t, x)
    }

    fn initial_state(&self, seed: SeedSpec) -> DVector<f64> {
        let mut rng = seed.rng();
        (self.x0_sampler)(&mut rng)
    }
}
