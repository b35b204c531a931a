//! Gibbs reweighting of the conditional reference law `mu_y`.
//!
//! Under `mu_y` the signal is `x_t = x0 + sigma0 B_t + sigma1 y_t`: all drift
//! is removed and the shared noise is frozen to the observed path. The
//! conditioned signal differs from it by the drift gap
//! `beta(x) = (A - sigma1 C) x`, which [`energy`] prices by Girsanov.
//!
//! Reweighting `mu_y` into the filter also needs the information the
//! observation drift `C x` carries about the signal, priced by
//! [`observation_energy`]. The sum, [`filtering_energy`], is exactly
//! `-log` of the density of the Euler chain relative to the driftless chain,
//! so `exp(-filtering_energy) d mu_y / Z(y)` is the discrete posterior and
//! `Z(y)` is the observation likelihood ratio of the two chains.
//!
//! All stochastic integrals are left-endpoint (Itô) sums.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LinearModel, Path, TimeGrid};
use crate::oracle::check_model_grid;
use crate::par;
use crate::rng::SeedSpec;
use crate::sampler::sample_reference;
use crate::stats::log_sum_exp;

/// `total = -stochastic_term + quadratic_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub stochastic_term: f64,
    pub quadratic_term: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn assemble(stochastic_term: f64, quadratic_term: f64) -> Self {
        Self {
            stochastic_term,
            quadratic_term,
            total: -stochastic_term + quadratic_term,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteringEnergy {
    pub drift: EnergyBreakdown,
    pub observation: EnergyBreakdown,
    pub total: f64,
}

/// Precomputed coefficients for repeated energy evaluation.
#[derive(Debug, Clone)]
pub struct EnergyEvaluator {
    gap: DMatrix<f64>,
    precision: DMatrix<f64>,
    c: DMatrix<f64>,
    sigma1: DMatrix<f64>,
}

impl EnergyEvaluator {
    pub fn new(model: &LinearModel) -> Result<Self> {
        model.validate().into_result()?;
        let precision = model
            .private_covariance()
            .try_inverse()
            .ok_or_else(|| Error::numerical("sigma0 sigma0^T is not invertible"))?;
        Ok(Self {
            gap: model.drift_gap(),
            precision,
            c: model.c.clone(),
            sigma1: model.sigma1.clone(),
        })
    }

    fn check(&self, x: &Path, y: &Path) -> Result<()> {
        if !x.grid().same_as(y.grid()) {
            return Err(Error::GridMismatch("signal and observation grids differ".into()));
        }
        if x.dim() != self.gap.nrows() || y.dim() != self.c.nrows() {
            return Err(Error::invalid(format!(
                "path dimensions ({}, {}) do not match the model ({}, {})",
                x.dim(),
                y.dim(),
                self.gap.nrows(),
                self.c.nrows()
            )));
        }
        Ok(())
    }

    /// Left endpoints, increments of `x` and of `y`, each `N x dim`.
    fn split(path: &Path) -> (DMatrix<f64>, DMatrix<f64>) {
        let v = path.values();
        let n = v.nrows() - 1;
        let left = v.rows(0, n).into_owned();
        let inc = v.rows(1, n) - v.rows(0, n);
        (left, inc)
    }

    /// The drift-gap energy.
    pub fn drift(&self, x: &Path, y: &Path) -> Result<EnergyBreakdown> {
        self.check(x, y)?;
        let dt = x.grid().dt();
        let (xl, dx) = Self::split(x);
        let (_, dy) = Self::split(y);
        // Row i of beta is beta(x_i)^T.
        let beta = xl * self.gap.transpose();
        let weighted = &beta * &self.precision;
        let residual = dx - dy * self.sigma1.transpose();
        let stochastic = weighted.component_mul(&residual).sum();
        let quadratic = 0.5 * weighted.component_mul(&beta).sum() * dt;
        Ok(EnergyBreakdown::assemble(stochastic, quadratic))
    }

    /// The observation-likelihood energy, `-sum (C x_i)^T dy_i + 1/2 sum |C x_i|^2 dt`.
    pub fn observation(&self, x: &Path, y: &Path) -> Result<EnergyBreakdown> {
        self.check(x, y)?;
        let dt = x.grid().dt();
        let (xl, _) = Self::split(x);
        let (_, dy) = Self::split(y);
        let h = xl * self.c.transpose();
        let stochastic = h.component_mul(&dy).sum();
        let quadratic = 0.5 * h.norm_squared() * dt;
        Ok(EnergyBreakdown::assemble(stochastic, quadratic))
    }

    pub fn filtering(&self, x: &Path, y: &Path) -> Result<FilteringEnergy> {
        let drift = self.drift(x, y)?;
        let observation = self.observation(x, y)?;
        Ok(FilteringEnergy {
            drift,
            observation,
            total: drift.total + observation.total,
        })
    }
}

/// Drift-gap energy
///
/// ```text
/// H(x, y) = -sum beta(x_i)^T (S0)^-1 (dx_i - sigma1 dy_i) + 1/2 sum beta(x_i)^T (S0)^-1 beta(x_i) dt
/// ```
/// with `S0 = sigma0 sigma0^T`.
pub fn energy(model: &LinearModel, x: &Path, y: &Path) -> Result<EnergyBreakdown> {
    EnergyEvaluator::new(model)?.drift(x, y)
}

pub fn observation_energy(model: &LinearModel, x: &Path, y: &Path) -> Result<EnergyBreakdown> {
    EnergyEvaluator::new(model)?.observation(x, y)
}

/// Energy of the filter relative to `mu_y`: drift gap plus observation
/// likelihood.
pub fn filtering_energy(model: &LinearModel, x: &Path, y: &Path) -> Result<FilteringEnergy> {
    EnergyEvaluator::new(model)?.filtering(x, y)
}

/// Form of the uncorrelated-noise observation energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnForm {
    /// `-(sum h(x_i)^T dy_i - 1/2 sum |h(x_i)|^2 dt)`
    Direct,
    /// Summation by parts:
    /// `-(y_N^T h(x_N) - sum y_{i+1}^T (h(x_{i+1}) - h(x_i)) - 1/2 sum |h(x_i)|^2 dt)`,
    /// which needs no increments of `y`.
    Robust,
}

/// `-log` of the observation likelihood of `y` given `x` relative to Wiener
/// measure, for independent signal and observation noise (`h(x) = C x`).
pub fn mn_energy_uncorrelated(model: &LinearModel, x: &Path, y: &Path, form: MnForm) -> Result<f64> {
    if model.sigma1.iter().any(|v| *v != 0.0) {
        return Err(Error::invalid(
            "uncorrelated energy undefined under shared noise (sigma1 != 0)",
        ));
    }
    if !x.grid().same_as(y.grid()) {
        return Err(Error::GridMismatch("signal and observation grids differ".into()));
    }
    let dt = x.grid().dt();
    let n = x.grid().steps();
    let h = x.values() * model.c.transpose();
    let quadratic = 0.5 * h.rows(0, n).norm_squared() * dt;
    let yv = y.values();
    let value = match form {
        MnForm::Direct => {
            let dy = yv.rows(1, n) - yv.rows(0, n);
            h.rows(0, n).component_mul(&dy).sum()
        }
        MnForm::Robust => {
            let boundary = h.row(n).dot(&yv.row(n)) - h.row(0).dot(&yv.row(0));
            let dh = h.rows(1, n) - h.rows(0, n);
            boundary - dh.component_mul(&yv.rows(1, n)).sum()
        }
    };
    Ok(-(value - quadratic))
}

/// Reference-law draws with log-weights.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub stream_ids: Vec<u64>,
    pub paths: Vec<Path>,
    pub log_weights: Vec<f64>,
    pub normalized: bool,
}

fn weight_failure(log_weights: &[f64]) -> Error {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = log_weights.iter().copied().fold(f64::INFINITY, f64::min);
    let nan = log_weights.iter().filter(|v| v.is_nan()).count();
    Error::numerical(format!(
        "importance weights degenerate: max log-weight {max:e}, min log-weight {min:e}, \
         {nan} NaN of {}",
        log_weights.len()
    ))
}

impl WeightedEnsemble {
    pub fn new(stream_ids: Vec<u64>, paths: Vec<Path>, log_weights: Vec<f64>) -> Result<Self> {
        if stream_ids.len() != log_weights.len() || (!paths.is_empty() && paths.len() != log_weights.len()) {
            return Err(Error::invalid("ensemble components have different lengths"));
        }
        Ok(Self {
            stream_ids,
            paths,
            log_weights,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Shift log-weights so the weights sum to one. Returns the
    /// log-sum-exp that was removed.
    pub fn normalize(&mut self) -> Result<f64> {
        if self.log_weights.iter().any(|v| v.is_nan()) {
            return Err(weight_failure(&self.log_weights));
        }
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return Err(weight_failure(&self.log_weights));
        }
        for lw in &mut self.log_weights {
            *lw -= lse;
        }
        self.normalized = true;
        Ok(lse)
    }

    /// Normalised weights.
    pub fn weights(&self) -> Vec<f64> {
        let shift = if self.normalized {
            0.0
        } else {
            log_sum_exp(&self.log_weights)
        };
        self.log_weights.iter().map(|lw| (lw - shift).exp()).collect()
    }

    /// `1 / sum w_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }
}

/// Weighted moments of the signal at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrack {
    pub times: Vec<f64>,
    /// `(N+1) x d`.
    pub means: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
    /// Self-normalised IS standard errors of the means, `(N+1) x d`.
    pub mean_se: DMatrix<f64>,
    /// Standard errors of the marginal variances (diagonal of `covs`).
    pub var_se: DMatrix<f64>,
}

impl MomentTrack {
    pub fn terminal_mean(&self) -> DVector<f64> {
        self.means.row(self.means.nrows() - 1).transpose()
    }

    pub fn terminal_cov(&self) -> &DMatrix<f64> {
        self.covs.last().expect("moment track is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsDiagnostics {
    pub ess: f64,
    pub max_log_weight: f64,
    pub min_log_weight: f64,
    pub log_normalizer: f64,
    /// Posterior expectation of `|H|`; finite exactly when `|H| e^{-H}` is
    /// `mu_y`-integrable (given `0 < Z < inf`).
    pub posterior_abs_energy: f64,
}

#[derive(Debug, Clone)]
pub struct GibbsPosterior {
    pub ensemble: WeightedEnsemble,
    pub track: MomentTrack,
    pub diagnostics: GibbsDiagnostics,
}

fn check_ensemble_size(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid(format!("ensemble size must be >= 2, got {m}")));
    }
    Ok(())
}

fn weighted_track(paths: &[Path], weights: &[f64]) -> MomentTrack {
    let grid = paths[0].grid().clone();
    let d = paths[0].dim();
    let len = grid.len();
    let mut means = DMatrix::zeros(len, d);
    let mut mean_se = DMatrix::zeros(len, d);
    let mut var_se = DMatrix::zeros(len, d);
    let mut covs = Vec::with_capacity(len);
    for t in 0..len {
        let mut mean = DVector::zeros(d);
        for (p, w) in paths.iter().zip(weights) {
            for k in 0..d {
                mean[k] += w * p.values()[(t, k)];
            }
        }
        let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
        for (p, w) in paths.iter().zip(weights) {
            let r = DVector::from_fn(d, |k, _| p.values()[(t, k)] - mean[k]);
            cov += &r * r.transpose() * *w;
        }
        for k in 0..d {
            let mut s_mean = 0.0f64;
            let mut s_var = 0.0f64;
            for (p, w) in paths.iter().zip(weights) {
                let r: f64 = p.values()[(t, k)] - mean[k];
                s_mean += w * w * r * r;
                s_var += w * w * (r * r - cov[(k, k)]).powi(2);
            }
            mean_se[(t, k)] = s_mean.sqrt();
            var_se[(t, k)] = s_var.sqrt();
        }
        means.row_mut(t).copy_from(&mean.transpose());
        covs.push(cov);
    }
    MomentTrack {
        times: grid.times().to_vec(),
        means,
        covs,
        mean_se,
        var_se,
    }
}

/// Self-normalised importance sampling of the filter: draw `m` paths from
/// `mu_y` (stream ids `0..m` under `seed.master_seed`), weight by
/// `exp(-filtering_energy)`, and summarise the weighted marginals.
pub fn importance_posterior(
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<GibbsPosterior> {
    check_ensemble_size(m)?;
    check_model_grid(model, grid)?;
    let eval = EnergyEvaluator::new(model)?;
    let draws = par::try_map_indexed(m, |i| -> Result<(Path, f64)> {
        let x = sample_reference(model, grid, y, seed.with_stream(i as u64))?;
        let h = eval.filtering(&x, y)?.total;
        Ok((x, -h))
    })?;
    let (paths, log_weights): (Vec<Path>, Vec<f64>) = draws.into_iter().unzip();
    let max_log_weight = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_log_weight = log_weights.iter().copied().fold(f64::INFINITY, f64::min);
    let raw = log_weights.clone();
    let mut ensemble = WeightedEnsemble::new((0..m as u64).collect(), paths, log_weights)?;
    let lse = ensemble.normalize()?;
    let weights = ensemble.weights();
    let track = weighted_track(&ensemble.paths, &weights);
    let posterior_abs_energy = weights.iter().zip(&raw).map(|(w, lw)| w * lw.abs()).sum();
    let diagnostics = GibbsDiagnostics {
        ess: 1.0 / weights.iter().map(|w| w * w).sum::<f64>(),
        max_log_weight,
        min_log_weight,
        log_normalizer: lse - (m as f64).ln(),
        posterior_abs_energy,
    };
    Ok(GibbsPosterior {
        ensemble,
        track,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalizer {
    pub log_z: f64,
    pub standard_error: f64,
}

/// `log(mean(exp(lw)))` with a jackknife standard error.
pub fn log_mean_exp_jackknife(log_weights: &[f64]) -> Result<LogNormalizer> {
    let m = log_weights.len();
    check_ensemble_size(m)?;
    if log_weights.iter().any(|v| v.is_nan()) {
        return Err(weight_failure(log_weights));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(weight_failure(log_weights));
    }
    let scaled: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let mf = m as f64;
    let log_z = max + (total / mf).ln();
    let loo: Vec<f64> = scaled
        .iter()
        .map(|s| max + ((total - s).max(f64::MIN_POSITIVE) / (mf - 1.0)).ln())
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / mf;
    let var = (mf - 1.0) / mf * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>();
    Ok(LogNormalizer {
        log_z,
        standard_error: var.sqrt(),
    })
}

/// Log-weights `-filtering_energy` of `m` reference draws (the same draws
/// [`importance_posterior`] uses for the same seed), without storing paths.
pub fn reference_log_weights(
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    check_model_grid(model, grid)?;
    let eval = EnergyEvaluator::new(model)?;
    par::try_map_indexed(m, |i| -> Result<f64> {
        let x = sample_reference(model, grid, y, seed.with_stream(i as u64))?;
        Ok(-eval.filtering(&x, y)?.total)
    })
}

/// Monte Carlo estimate of `log Z(y) = log E_{mu_y}[exp(-H)]`.
pub fn estimate_log_normalizer(
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<LogNormalizer> {
    check_ensemble_size(m)?;
    log_mean_exp_jackknife(&reference_log_weights(model, grid, y, m, seed)?)
}
