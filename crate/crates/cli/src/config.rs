//! Experiment configuration (TOML). Unknown keys are rejected.
//!
//! ```toml
//! [model.linear]            # or [model.nonlinear]
//! a = -1.0                  # scalar, or rows: [[-1.0, 0.0], [0.0, -2.0]]
//! c = 1.0
//! sigma0 = 1.0
//! sigma1 = 0.5
//! x0 = 1.0                  # scalar or vector
//!
//! [grid]
//! level = 6
//! horizon = 1.0
//!
//! [run]
//! ensemble = 100000
//! master_seed = 42
//! out = "results"
//! ```

use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use corrnoise::model::MAX_GRID_LEVEL;
use corrnoise::{Coupling, LinearModel, NonlinearModel, SeedSpec, SignalObservationModel, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>, CliError> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                    return Err(CliError::config(format!("`{name}` must be a non-empty rectangular matrix")));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Items(Vec<f64>),
}

impl VectorSpec {
    fn to_vector(&self) -> DVector<f64> {
        match self {
            VectorSpec::Scalar(v) => DVector::from_element(1, *v),
            VectorSpec::Items(v) => DVector::from_column_slice(v),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub a: MatrixSpec,
    pub c: MatrixSpec,
    pub sigma0: MatrixSpec,
    pub sigma1: MatrixSpec,
    pub x0: VectorSpec,
}

/// Scalar state-dependent family:
/// `b(x) = a x + a_sin sin x`, `h(x) = c x + c_tanh tanh x`,
/// `sigma0 = s0`, `sigma1(x) = s1 + s1_cos cos x`, `X_0 ~ N(x0, x0_sd^2)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSpec {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub a_sin: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub c_tanh: f64,
    pub s0: f64,
    #[serde(default)]
    pub s1: f64,
    #[serde(default)]
    pub s1_cos: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub x0_sd: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub linear: Option<LinearSpec>,
    pub nonlinear: Option<NonlinearSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub level: u32,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub out: Option<PathBuf>,
}

fn default_ensemble() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_couplings")]
    pub couplings: Vec<String>,
}

fn default_couplings() -> Vec<String> {
    vec!["joint".into()]
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// Observation path CSV, relative to the config file. Simulated from the
    /// joint law when absent.
    pub observation: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeEnergySection {
    pub observation: Option<PathBuf>,
    /// Mean shifts of the posterior along `direction`.
    #[serde(default)]
    pub shifts: Vec<f64>,
    /// All ones (every time and coordinate) when absent.
    pub direction: Option<Vec<f64>>,
    /// Named extra members: `"posterior"`, `"reference"`.
    #[serde(default)]
    pub include: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularitySection {
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    pub t: Option<f64>,
    #[serde(default = "default_rn_steps")]
    pub rn_steps: Vec<usize>,
    #[serde(default = "default_rn_samples")]
    pub rn_samples: usize,
    #[serde(default = "yes")]
    pub classifier: bool,
    #[serde(default = "default_classifier_levels")]
    pub classifier_levels: Vec<u32>,
    #[serde(default = "half")]
    pub threshold_fraction: f64,
}

impl Default for SingularitySection {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            pairs: default_pairs(),
            t: None,
            rn_steps: default_rn_steps(),
            rn_samples: default_rn_samples(),
            classifier: true,
            classifier_levels: default_classifier_levels(),
            threshold_fraction: 0.5,
        }
    }
}

fn default_levels() -> Vec<u32> {
    (6..=12).collect()
}
fn default_pairs() -> usize {
    1000
}
fn default_rn_steps() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
fn default_rn_samples() -> usize {
    10_000
}
fn default_classifier_levels() -> Vec<u32> {
    vec![8, 10, 12]
}
fn yes() -> bool {
    true
}
fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub run: RunSection,
    pub simulate: Option<SimulateSection>,
    pub filter: Option<FilterSection>,
    pub free_energy: Option<FreeEnergySection>,
    pub singularity: Option<SingularitySection>,
}

/// Model built from the config, with the grid horizon as its horizon.
#[derive(Debug, Clone)]
pub enum BuiltModel {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

impl BuiltModel {
    pub fn as_dyn(&self) -> &dyn SignalObservationModel {
        match self {
            BuiltModel::Linear(m) => m,
            BuiltModel::Nonlinear(m) => m,
        }
    }

    pub fn linear(&self, command: &str) -> Result<&LinearModel, CliError> {
        match self {
            BuiltModel::Linear(m) => Ok(m),
            BuiltModel::Nonlinear(_) => Err(CliError::config(format!("`{command}` requires a [model.linear] section"))),
        }
    }
}

/// Parsed config plus the raw-bytes hash used in output headers.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

pub fn load(path: &FsPath) -> Result<LoadedConfig, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::config("config is not valid UTF-8"))?;
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hash = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let dir = path.parent().map(FsPath::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, hash, dir })
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<Arc<TimeGrid>, CliError> {
        if self.grid.level > MAX_GRID_LEVEL {
            return Err(CliError::config(format!(
                "grid cap: level {} exceeds the limit {MAX_GRID_LEVEL}",
                self.grid.level
            )));
        }
        Ok(Arc::new(TimeGrid::dyadic(self.grid.level, self.grid.horizon)?))
    }

    pub fn build_model(&self) -> Result<BuiltModel, CliError> {
        let horizon = self.grid.horizon;
        match (&self.model.linear, &self.model.nonlinear) {
            (Some(l), None) => {
                let model = LinearModel::new(
                    l.a.to_matrix("a")?,
                    l.c.to_matrix("c")?,
                    l.sigma0.to_matrix("sigma0")?,
                    l.sigma1.to_matrix("sigma1")?,
                    l.x0.to_vector(),
                    horizon,
                );
                model.validate().into_result()?;
                Ok(BuiltModel::Linear(model))
            }
            (None, Some(n)) => {
                let model = nonlinear_model(n, horizon);
                model.validate(256, SeedSpec::new(self.run.master_seed, 0).derive(0x7a1d)).into_result()?;
                Ok(BuiltModel::Nonlinear(model))
            }
            (Some(_), Some(_)) => Err(CliError::config("[model] must contain exactly one of `linear`, `nonlinear`")),
            (None, None) => Err(CliError::config("[model] needs a `linear` or `nonlinear` table")),
        }
    }
}

fn nonlinear_model(s: &NonlinearSpec, horizon: f64) -> NonlinearModel {
    let NonlinearSpec {
        a,
        a_sin,
        c,
        c_tanh,
        s0,
        s1,
        s1_cos,
        x0,
        x0_sd,
    } = s.clone();
    let growth = 1.0 + a.abs() + a_sin.abs() + c.abs() + c_tanh.abs() + s0.abs() + s1.abs() + s1_cos.abs();
    NonlinearModel {
        signal_dim: 1,
        obs_dim: 1,
        b: Arc::new(move |_, x| x.map(|v| a * v + a_sin * v.sin())),
        h: Arc::new(move |x| x.map(|v| c * v + c_tanh * v.tanh())),
        sigma0: Arc::new(move |_, _| DMatrix::from_element(1, 1, s0)),
        sigma1: Arc::new(move |_, x| DMatrix::from_element(1, 1, s1 + s1_cos * x[0].cos())),
        x0_sampler: Arc::new(move |rng| {
            use rand_distr::{Distribution, StandardNormal};
            let z: f64 = StandardNormal.sample(rng);
            DVector::from_element(1, x0 + x0_sd * z)
        }),
        horizon,
        growth_bound: growth,
    }
}

pub fn parse_coupling(name: &str) -> Result<Coupling, CliError> {
    match name {
        "joint" => Ok(Coupling::Joint),
        "product" => Ok(Coupling::Product),
        "reference" => Ok(Coupling::Reference),
        other => Err(CliError::config(format!(
            "unknown coupling `{other}` (expected joint, product or reference)"
        ))),
    }
}
