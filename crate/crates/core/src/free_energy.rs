//! Free energy of Gaussian candidate measures on the signal grid:
//!
//! ```text
//! F(P) = KL(P || mu_y) + E_P[H(., y)]
//! ```
//!
//! With `H` the filtering energy, `F(P) = KL(P || posterior) - log Z(y)`, so
//! the posterior is the unique minimiser and the minimum value is
//! `-log Z(y)`. The KL term is closed form; the energy term is Monte Carlo
//! over exact draws from the candidate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kl_divergence, GaussianLaw, Layout};
use crate::gibbs::EnergyEvaluator;
use crate::model::{LinearModel, Path, TimeGrid};
use crate::oracle::{check_dense_level, check_model_grid, posterior};
use crate::par;
use crate::rng::SeedSpec;
use crate::stats::{excess_kurtosis, mean_and_se};

/// Excess kurtosis of sampled energies above which the expectation is
/// reported as `+inf` (heavy-tail guard, a diagnostic only).
pub const ENERGY_KURTOSIS_GUARD: f64 = 100.0;

/// The reference law `mu_y` on the grid: mean `x0 + sigma1 y_i`, covariance
/// `sigma0 sigma0^T min(t_i, t_j)`.
pub fn reference_law(model: &LinearModel, grid: &TimeGrid, y: &Path) -> Result<GaussianLaw> {
    check_model_grid(model, grid)?;
    check_dense_level(grid, "reference law")?;
    if !y.grid().same_as(grid) || y.dim() != model.obs_dim() {
        return Err(Error::GridMismatch(
            "observation path does not match the grid or model".into(),
        ));
    }
    let d = model.signal_dim();
    let steps = grid.steps();
    let layout = Layout::signal_only(steps, d);
    let s0 = model.private_covariance();
    let mut mean = DVector::zeros(layout.dim());
    for i in 1..=steps {
        let m = &model.x0 + &model.sigma1 * y.state(i);
        mean.rows_mut((i - 1) * d, d).copy_from(&m);
    }
    let times = grid.times();
    let cov = DMatrix::from_fn(layout.dim(), layout.dim(), |r, c| {
        let (i, k) = (r / d + 1, r % d);
        let (j, l) = (c / d + 1, c % d);
        s0[(k, l)] * times[i].min(times[j])
    });
    GaussianLaw::new(mean, cov, layout)
}

/// Closed-form KL divergence between Gaussian laws.
pub fn kl_gaussian(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    kl_divergence(p, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMeasure {
    pub law: GaussianLaw,
    pub label: String,
}

impl CandidateMeasure {
    pub fn new(law: GaussianLaw, label: impl Into<String>) -> Result<Self> {
        if law.layout.obs_dim != 0 {
            return Err(Error::invalid("candidate must be a law over signal paths only"));
        }
        Ok(Self {
            law: law.repair_psd()?,
            label: label.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyEstimate {
    /// `+inf` when the heavy-tail guard trips.
    pub mean: f64,
    pub standard_error: f64,
    pub excess_kurtosis: f64,
    pub integrable: bool,
}

fn candidate_path(grid: &Arc<TimeGrid>, x0: &DVector<f64>, flat: &DVector<f64>) -> Result<Path> {
    let d = x0.len();
    let values = DMatrix::from_fn(grid.len(), d, |i, k| {
        if i == 0 {
            x0[k]
        } else {
            flat[(i - 1) * d + k]
        }
    });
    Path::new(grid.clone(), values)
}

fn check_candidate(candidate: &CandidateMeasure, model: &LinearModel, grid: &TimeGrid) -> Result<()> {
    let l = candidate.law.layout;
    if l.steps != grid.steps() || l.signal_dim != model.signal_dim() || l.obs_dim != 0 {
        return Err(Error::GridMismatch(format!(
            "candidate '{}' is laid out for {} steps x {} (obs {}), grid has {} steps, model d = {}",
            candidate.label,
            l.steps,
            l.signal_dim,
            l.obs_dim,
            grid.steps(),
            model.signal_dim()
        )));
    }
    Ok(())
}

fn estimate_energy(
    candidate: &CandidateMeasure,
    model: &LinearModel,
    eval: &EnergyEvaluator,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<EnergyEstimate> {
    if m < 2 {
        return Err(Error::invalid(format!("ensemble size must be >= 2, got {m}")));
    }
    let grid = y.grid();
    check_candidate(candidate, model, grid)?;
    let factor = candidate.law.sampling_factor()?;
    let energies = par::try_map_indexed(m, |i| -> Result<f64> {
        let flat = candidate.law.sample_with(&factor, seed.with_stream(i as u64));
        let x = candidate_path(grid, &model.x0, &flat)?;
        Ok(eval.filtering(&x, y)?.total)
    })?;
    let (mean, se) = mean_and_se(&energies);
    let kurt = excess_kurtosis(&energies);
    // A constant sample (NaN kurtosis) is trivially light-tailed.
    let integrable = mean.is_finite() && (kurt.is_nan() || kurt <= ENERGY_KURTOSIS_GUARD);
    Ok(EnergyEstimate {
        mean: if integrable { mean } else { f64::INFINITY },
        standard_error: se,
        excess_kurtosis: kurt,
        integrable,
    })
}

/// Monte Carlo `E_P[H(., y)]` over `m` exact draws from the candidate.
pub fn expected_energy(
    candidate: &CandidateMeasure,
    model: &LinearModel,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<EnergyEstimate> {
    let eval = EnergyEvaluator::new(model)?;
    estimate_energy(candidate, model, &eval, y, m, seed)
}

/// KL term, energy term and their sum for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub kl_to_reference: f64,
    pub energy: EnergyEstimate,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyReport {
    pub label: String,
    pub kl_to_reference: f64,
    pub expected_energy: f64,
    pub total: f64,
    /// `total(candidate) - total(posterior)`.
    pub gibbs_gap: f64,
    /// Closed-form `KL(candidate || posterior)`.
    pub gap_predicted: f64,
    /// Standard error of the candidate's energy term.
    pub mc_standard_error: f64,
    /// Standard error of the gap, candidate and baseline errors combined.
    pub gap_standard_error: f64,
    pub energy_integrable: bool,
}

/// Model, grid and observation with the reference and posterior laws built
/// once.
#[derive(Debug, Clone)]
pub struct FreeEnergyProblem {
    model: LinearModel,
    y: Path,
    reference: GaussianLaw,
    posterior: GaussianLaw,
    eval: EnergyEvaluator,
}

impl FreeEnergyProblem {
    pub fn new(model: &LinearModel, grid: &Arc<TimeGrid>, y: &Path) -> Result<Self> {
        let reference = reference_law(model, grid, y)?;
        let posterior = posterior(model, grid, y)?;
        Ok(Self {
            model: model.clone(),
            y: y.clone(),
            reference,
            posterior,
            eval: EnergyEvaluator::new(model)?,
        })
    }

    pub fn reference(&self) -> &GaussianLaw {
        &self.reference
    }

    pub fn posterior(&self) -> &GaussianLaw {
        &self.posterior
    }

    pub fn reference_candidate(&self) -> CandidateMeasure {
        CandidateMeasure {
            law: self.reference.clone(),
            label: "reference".into(),
        }
    }

    pub fn posterior_candidate(&self) -> CandidateMeasure {
        CandidateMeasure {
            law: self.posterior.clone(),
            label: "posterior".into(),
        }
    }

    /// Posterior with every mean coordinate moved by `shift`.
    pub fn shifted_posterior(&self, shift: f64) -> CandidateMeasure {
        let mut law = self.posterior.clone();
        law.mean.add_scalar_mut(shift);
        CandidateMeasure {
            law,
            label: format!("posterior{shift:+}"),
        }
    }

    pub fn evaluate(&self, candidate: &CandidateMeasure, m: usize, seed: SeedSpec) -> Result<Evaluation> {
        let kl = kl_gaussian(&candidate.law, &self.reference)?;
        let energy = estimate_energy(candidate, &self.model, &self.eval, &self.y, m, seed)?;
        Ok(Evaluation {
            kl_to_reference: kl,
            energy,
            total: kl + energy.mean,
        })
    }

    /// The posterior's own evaluation, the baseline for Gibbs gaps.
    pub fn baseline(&self, m: usize, seed: SeedSpec) -> Result<Evaluation> {
        self.evaluate(&self.posterior_candidate(), m, seed)
    }

    pub fn report(
        &self,
        candidate: &CandidateMeasure,
        baseline: &Evaluation,
        m: usize,
        seed: SeedSpec,
    ) -> Result<FreeEnergyReport> {
        let eval = self.evaluate(candidate, m, seed)?;
        let gap_predicted = kl_gaussian(&candidate.law, &self.posterior)?;
        Ok(FreeEnergyReport {
            label: candidate.label.clone(),
            kl_to_reference: eval.kl_to_reference,
            expected_energy: eval.energy.mean,
            total: eval.total,
            gibbs_gap: eval.total - baseline.total,
            gap_predicted,
            mc_standard_error: eval.energy.standard_error,
            gap_standard_error: eval
                .energy
                .standard_error
                .hypot(baseline.energy.standard_error),
            energy_integrable: eval.energy.integrable,
        })
    }
}

/// One-shot report for a single candidate.
pub fn free_energy(
    candidate: &CandidateMeasure,
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    m: usize,
    seed: SeedSpec,
) -> Result<FreeEnergyReport> {
    let problem = FreeEnergyProblem::new(model, grid, y)?;
    let baseline = problem.baseline(m, seed)?;
    problem.report(candidate, &baseline, m, seed)
}

#[derive(Debug, Clone)]
pub enum CandidateFamily {
    /// `{ N(center.mean + s v, center.cov) : s in shifts }`.
    MeanShift {
        center: GaussianLaw,
        direction: DVector<f64>,
        shifts: Vec<f64>,
    },
    Explicit(Vec<CandidateMeasure>),
}

impl CandidateFamily {
    /// Mean shifts of the exact posterior along `direction`.
    pub fn posterior_shifts(problem: &FreeEnergyProblem, direction: DVector<f64>, shifts: Vec<f64>) -> Self {
        CandidateFamily::MeanShift {
            center: problem.posterior().clone(),
            direction,
            shifts,
        }
    }

    pub fn members(&self) -> Result<Vec<CandidateMeasure>> {
        match self {
            CandidateFamily::MeanShift {
                center,
                direction,
                shifts,
            } => {
                if direction.len() != center.dim() {
                    return Err(Error::invalid(format!(
                        "shift direction has length {}, candidate dimension is {}",
                        direction.len(),
                        center.dim()
                    )));
                }
                shifts
                    .iter()
                    .map(|&s| {
                        let law = GaussianLaw {
                            mean: &center.mean + direction * s,
                            ..center.clone()
                        };
                        CandidateMeasure::new(law, format!("shift{s:+}"))
                    })
                    .collect()
            }
            CandidateFamily::Explicit(list) => Ok(list.clone()),
        }
    }

    pub fn shifts(&self) -> Option<&[f64]> {
        match self {
            CandidateFamily::MeanShift { shifts, .. } => Some(shifts),
            CandidateFamily::Explicit(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FamilyOutcome {
    pub best: usize,
    pub best_candidate: CandidateMeasure,
    pub reports: Vec<FreeEnergyReport>,
}

/// Evaluate every member with the same seed (common random numbers) and
/// return the one with the smallest free energy.
pub fn minimize_over_family(
    model: &LinearModel,
    grid: &Arc<TimeGrid>,
    y: &Path,
    family: &CandidateFamily,
    m: usize,
    seed: SeedSpec,
) -> Result<FamilyOutcome> {
    let problem = FreeEnergyProblem::new(model, grid, y)?;
    minimize_in(&problem, family, m, seed)
}

pub fn minimize_in(
    problem: &FreeEnergyProblem,
    family: &CandidateFamily,
    m: usize,
    seed: SeedSpec,
) -> Result<FamilyOutcome> {
    let members = family.members()?;
    if members.is_empty() {
        return Err(Error::invalid("candidate family is empty"));
    }
    let baseline = problem.baseline(m, seed)?;
    let reports = members
        .iter()
        .map(|c| problem.report(c, &baseline, m, seed))
        .collect::<Result<Vec<_>>>()?;
    let best = reports
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.total < reports[best].total { i } else { best });
    Ok(FamilyOutcome {
        best,
        best_candidate: members[best].clone(),
        reports,
    })
}

/// Second derivative of `s -> KL(N(m + s v, S) || N(m, S))`: `v^T S^-1 v`.
pub fn shift_curvature(posterior: &GaussianLaw, direction: &DVector<f64>) -> Result<f64> {
    let ch = posterior.cholesky()?;
    Ok(direction.dot(&ch.solve(direction)))
}
