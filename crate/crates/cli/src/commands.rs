use std::path::PathBuf;
use std::sync::Arc;

use corrnoise::free_energy::{CandidateFamily, CandidateMeasure, FreeEnergyProblem};
use corrnoise::gibbs::{importance_posterior, mn_energy_uncorrelated, MnForm};
use corrnoise::io::{self, fmt_f64, MarginalTrack};
use corrnoise::oracle::{exact_log_normalizer, kalman_correlated, posterior};
use corrnoise::sampler::{sample_reference, simulate_joint, simulate_pair};
use corrnoise::singularity::{
    classification_experiment, covariation_decay_study, degeneration_fit, empirical_qv_blocks,
    rn_degeneration_experiment,
};
use corrnoise::{Coupling, LinearModel, Path, SeedSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};

use crate::config::{parse_coupling, BuiltModel, ExperimentConfig, LoadedConfig};
use crate::output::Output;
use crate::CliError;

// Seed tags, one per independent random input of a command.
const OBSERVATION_TAG: u64 = 0x0b5;
const REFERENCE_TAG: u64 = 0x4ef;
const FILTER_TAG: u64 = 0xf17;
const FREE_ENERGY_TAG: u64 = 0xfe0;
const CLASSIFIER_TAG: u64 = 0xc1a;
const DECAY_TAG: u64 = 0xdec;
const RN_TAG: u64 = 0x4a0;
const QV_TAG: u64 = 0x9b0;

pub struct Context {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub seed: u64,
    pub out: Output,
}

impl Context {
    pub fn new(
        loaded: LoadedConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        command: &str,
    ) -> Result<Self, CliError> {
        let seed = seed.unwrap_or(loaded.config.run.master_seed);
        let dir = out
            .or_else(|| loaded.config.run.out.clone())
            .unwrap_or_else(|| PathBuf::from("corrnoise-out"));
        Ok(Self {
            out: Output::new(dir, command, &loaded.hash, seed),
            config_dir: loaded.dir,
            config: loaded.config,
            seed,
        })
    }

    fn seed(&self, tag: u64) -> SeedSpec {
        SeedSpec::new(self.seed, 0).derive(tag)
    }

    fn write_path(&self, name: &str, path: &Path, prefix: &str) -> Result<(), CliError> {
        io::write_path(self.out.create(name)?, self.out.header(), path, prefix)?;
        Ok(())
    }

    /// Observation from a CSV (coarsened to the config level if finer) or
    /// simulated from the joint law.
    fn observation(&self, model: &LinearModel, grid: &Arc<TimeGrid>, file: Option<&PathBuf>) -> Result<Path, CliError> {
        match file {
            Some(rel) => {
                let full = self.config_dir.join(rel);
                let f = std::fs::File::open(&full)
                    .map_err(|e| CliError::config(format!("cannot open {}: {e}", full.display())))?;
                let y = io::read_path(f)?;
                if y.grid().horizon() != grid.horizon() || y.grid().level() < grid.level() {
                    return Err(CliError::config(format!(
                        "observation {} is on a level-{} grid over [0, {}], config asks for level {} over [0, {}]",
                        full.display(),
                        y.grid().level(),
                        y.grid().horizon(),
                        grid.level(),
                        grid.horizon()
                    )));
                }
                let y = y.coarsen(grid.level())?;
                // Re-home onto the shared grid allocation.
                Ok(Path::new(grid.clone(), y.values().clone())?)
            }
            None => Ok(simulate_joint(model, grid, self.seed(OBSERVATION_TAG))?.y),
        }
    }
}

pub fn validate(ctx: &Context) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    match ctx.config.build_model()? {
        BuiltModel::Linear(m) => println!(
            "ok: linear model d={} n={} fingerprint={} grid level {} ({} steps)",
            m.signal_dim(),
            m.obs_dim(),
            m.fingerprint(),
            grid.level(),
            grid.steps()
        ),
        BuiltModel::Nonlinear(_) => println!("ok: nonlinear model, grid level {} ({} steps)", grid.level(), grid.steps()),
    }
    Ok(())
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    let model = ctx.config.build_model()?;
    let names = ctx
        .config
        .simulate
        .as_ref()
        .map(|s| s.couplings.clone())
        .unwrap_or_else(|| vec!["joint".into()]);
    if names.is_empty() {
        return Err(CliError::config("[simulate] couplings is empty"));
    }
    let seed = SeedSpec::new(ctx.seed, 0);
    for name in &names {
        match parse_coupling(name)? {
            c @ (Coupling::Joint | Coupling::Product) => {
                let pair = simulate_pair(model.as_dyn(), &grid, c, seed)?;
                ctx.write_path(&format!("{name}_x.csv"), &pair.x, "x")?;
                ctx.write_path(&format!("{name}_y.csv"), &pair.y, "y")?;
            }
            Coupling::Reference => {
                let lin = model.linear("simulate reference")?;
                let y = simulate_joint(lin, &grid, seed)?.y;
                let x = sample_reference(lin, &grid, &y, seed.derive(REFERENCE_TAG))?;
                ctx.write_path("reference_x.csv", &x, "x")?;
                ctx.write_path("reference_y.csv", &y, "y")?;
            }
        }
    }
    ctx.out.print_manifest();
    Ok(())
}

fn oracle_track(law: &corrnoise::GaussianLaw, model: &LinearModel, grid: &TimeGrid) -> MarginalTrack {
    let d = model.signal_dim();
    let mut means = vec![model.x0.clone()];
    let mut covs = vec![DMatrix::zeros(d, d)];
    for i in 1..=grid.steps() {
        let (m, c) = law.signal_marginal(i);
        means.push(m);
        covs.push(c);
    }
    MarginalTrack {
        model_hash: Some(model.fingerprint()),
        level: Some(grid.level()),
        times: grid.times().to_vec(),
        means,
        covs,
    }
}

fn rows_to_vectors(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.nrows()).map(|i| m.row(i).transpose()).collect()
}

/// Largest absolute deviation and largest deviation in standard-error units
/// over grid times `from..`, for means and marginal variances.
fn deviations(
    test: &MarginalTrack,
    oracle: &MarginalTrack,
    se: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    from: usize,
) -> [f64; 4] {
    let mut out = [0.0f64; 4];
    for i in from..oracle.times.len() {
        for k in 0..oracle.means[i].len() {
            let dm = (test.means[i][k] - oracle.means[i][k]).abs();
            let dv = (test.covs[i][(k, k)] - oracle.covs[i][(k, k)]).abs();
            out[0] = out[0].max(dm);
            out[2] = out[2].max(dv);
            if let Some((mse, vse)) = se {
                out[1] = out[1].max(dm / mse[(i, k)]);
                out[3] = out[3].max(dv / vse[(i, k)]);
            } else {
                out[1] = f64::NAN;
                out[3] = f64::NAN;
            }
        }
    }
    out
}

pub fn filter(ctx: &Context) -> Result<(), CliError> {
    let grid = ctx.config.grid()?;
    let built = ctx.config.build_model()?;
    let model = built.linear("filter")?;
    let section = ctx.config.filter.clone().unwrap_or_default();
    let y = ctx.observation(model, &grid, section.observation.as_ref())?;
    let law = posterior(model, &grid, &y)?;
    let oracle = oracle_track(&law, model, &grid);
    let kalman = kalman_correlated(model, &grid, &y)?;
    let kalman_track = MarginalTrack {
        model_hash: None,
        level: None,
        times: kalman.times.clone(),
        means: rows_to_vectors(&kalman.means),
        covs: kalman.covs.clone(),
    };
    let gibbs = importance_posterior(model, &grid, &y, ctx.config.run.ensemble, ctx.seed(FILTER_TAG))?;
    let gibbs_track = MarginalTrack {
        model_hash: None,
        level: None,
        times: gibbs.track.times.clone(),
        means: rows_to_vectors(&gibbs.track.means),
        covs: gibbs.track.covs.clone(),
    };

    let h = ctx.out.header();
    ctx.write_path("observation.csv", &y, "y")?;
    io::write_marginal_track(ctx.out.create("oracle_posterior.csv")?, h, &oracle)?;
    io::write_marginal_track(ctx.out.create("kalman_track.csv")?, h, &kalman_track)?;
    io::write_marginal_track(ctx.out.create("gibbs_track.csv")?, h, &gibbs_track)?;
    io::write_ensemble(ctx.out.create("gibbs_ensemble.csv")?, h, &gibbs.ensemble)?;

    let mut summary: Vec<(String, [f64; 4])> = vec![
        (
            "gibbs_vs_oracle".into(),
            deviations(&gibbs_track, &oracle, Some((&gibbs.track.mean_se, &gibbs.track.var_se)), 1),
        ),
        // The recursion filters; only its terminal marginal is a posterior
        // marginal of the full observation path.
        (
            "kalman_vs_oracle_terminal".into(),
            deviations(&kalman_track, &oracle, None, grid.steps()),
        ),
    ];
    if model.sigma1.iter().all(|v| *v == 0.0) {
        let mut worst = 0.0f64;
        for x in gibbs.ensemble.paths.iter().take(1000) {
            let d = mn_energy_uncorrelated(model, x, &y, MnForm::Direct)?;
            let r = mn_energy_uncorrelated(model, x, &y, MnForm::Robust)?;
            worst = worst.max((d - r).abs());
        }
        summary.push(("mn_direct_vs_robust".into(), [worst, f64::NAN, f64::NAN, f64::NAN]));
    }
    let columns: Vec<String> = ["comparison", "max_abs_mean_dev", "max_mean_dev_se", "max_abs_var_dev", "max_var_dev_se"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = summary
        .iter()
        .map(|(name, v)| std::iter::once(name.clone()).chain(v.iter().map(|x| fmt_f64(*x))).collect::<Vec<_>>());
    io::write_table(ctx.out.create("summary.csv")?, h, &columns, rows)?;

    let d = gibbs.diagnostics;
    let exact = exact_log_normalizer(model, &grid, &y)?;
    let columns: Vec<String> = [
        "ess",
        "max_log_weight",
        "min_log_weight",
        "log_normalizer",
        "exact_log_normalizer",
        "posterior_abs_energy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let row = [d.ess, d.max_log_weight, d.min_log_weight, d.log_normalizer, exact, d.posterior_abs_energy]
        .map(fmt_f64);
    io::write_table(ctx.out.create("diagnostics.csv")?, h, &columns, [row])?;

    let part = |what: &str, abs: f64, se: f64| match (abs.is_nan(), se.is_nan()) {
        (true, _) => String::new(),
        (false, true) => format!(" max |{what}| = {abs:.3e}"),
        (false, false) => format!(" max |{what}| = {abs:.3e} ({se:.2} SE)"),
    };
    for (name, v) in &summary {
        if name == "mn_direct_vs_robust" {
            println!("{name}:{}", part("direct - robust", v[0], v[1]));
        } else {
            println!("{name}:{},{}", part("mean dev", v[0], v[1]), part("var dev", v[2], v[3]));
        }
    }
    println!("ess = {:.1} of {}", d.ess, ctx.config.run.ensemble);
    ctx.out.print_manifest();
    Ok(())
}

pub fn free_energy(ctx: &Context) -> Result<(), CliError> {
    let section = ctx
        .config
        .free_energy
        .clone()
        .ok_or_else(|| CliError::config("free-energy needs a [free_energy] section describing the candidate family"))?;
    let grid = ctx.config.grid()?;
    let built = ctx.config.build_model()?;
    let model = built.linear("free-energy")?;
    let y = ctx.observation(model, &grid, section.observation.as_ref())?;
    let problem = FreeEnergyProblem::new(model, &grid, &y)?;

    let mut members: Vec<CandidateMeasure> = Vec::new();
    for name in &section.include {
        members.push(match name.as_str() {
            "posterior" => problem.posterior_candidate(),
            "reference" => problem.reference_candidate(),
            other => {
                return Err(CliError::config(format!(
                    "unknown candidate `{other}` (expected posterior or reference)"
                )))
            }
        });
    }
    let dim = problem.posterior().dim();
    let direction = match &section.direction {
        Some(v) if v.len() == dim => DVector::from_column_slice(v),
        Some(v) => {
            return Err(CliError::config(format!(
                "direction has {} entries, the candidate dimension is {dim}",
                v.len()
            )))
        }
        None => DVector::from_element(dim, 1.0),
    };
    let shifts = CandidateFamily::posterior_shifts(&problem, direction, section.shifts.clone());
    members.extend(shifts.members()?);
    if members.is_empty() {
        return Err(CliError::config("[free_energy] family is empty: set `shifts` and/or `include`"));
    }
    let family = CandidateFamily::Explicit(members);
    let outcome = corrnoise::free_energy::minimize_in(&problem, &family, ctx.config.run.ensemble, ctx.seed(FREE_ENERGY_TAG))?;

    let h = ctx.out.header();
    io::write_reports(ctx.out.create("free_energy.csv")?, h, &outcome.reports)?;
    if !section.shifts.is_empty() {
        let offset = section.include.len();
        let gaps: Vec<f64> = outcome.reports[offset..].iter().map(|r| r.gibbs_gap).collect();
        io::write_plot_data(ctx.out.create("gap_vs_shift.csv")?, h, &section.shifts, &gaps)?;
    }
    for r in &outcome.reports {
        println!(
            "{:<16} F = {:+.6} gap = {:+.6} (KL to posterior {:.6}, SE {:.2e})",
            r.label, r.total, r.gibbs_gap, r.gap_predicted, r.gap_standard_error
        );
    }
    println!("minimiser: {}", outcome.best_candidate.label);
    ctx.out.print_manifest();
    Ok(())
}

pub fn singularity(ctx: &Context) -> Result<(), CliError> {
    let section = ctx.config.singularity.clone().unwrap_or_default();
    let built = ctx.config.build_model()?;
    let model = built.as_dyn();
    let horizon = ctx.config.grid.horizon;
    let t = section.t.unwrap_or(horizon);
    let h = ctx.out.header();
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    if section.classifier {
        let mut rows = Vec::new();
        for &level in &section.classifier_levels {
            let r = classification_experiment(
                model,
                level,
                section.pairs,
                section.threshold_fraction,
                ctx.seed(CLASSIFIER_TAG).derive(level as u64),
            )?;
            println!(
                "classifier level {level}: joint error {:.4}, product error {:.4}",
                r.joint_error_rate, r.product_error_rate
            );
            rows.push(vec![
                r.level.to_string(),
                r.pairs.to_string(),
                fmt_f64(r.joint_error_rate),
                fmt_f64(r.product_error_rate),
            ]);
        }
        io::write_table(
            ctx.out.create("classification.csv")?,
            h,
            &strs(&["level", "pairs", "joint_error_rate", "product_error_rate"]),
            rows,
        )?;
    }

    for (coupling, tag) in [(Coupling::Product, 1u64), (Coupling::Joint, 2)] {
        let study = covariation_decay_study(model, t, &section.levels, section.pairs, coupling, ctx.seed(DECAY_TAG).derive(tag))?;
        let rows = study
            .rows
            .iter()
            .map(|r| vec![r.level.to_string(), fmt_f64(r.mean_norm), fmt_f64(r.variance)]);
        io::write_table(
            ctx.out.create(&format!("covariation_decay_{coupling}.csv"))?,
            h,
            &strs(&["level", "mean_norm", "var"]),
            rows,
        )?;
        let x: Vec<f64> = study.rows.iter().map(|r| r.level as f64).collect();
        let y: Vec<f64> = study.rows.iter().map(|r| r.variance.log2()).collect();
        io::write_plot_data(ctx.out.create(&format!("covariation_decay_{coupling}_plot.csv"))?, h, &x, &y)?;
        let f = study.log2_variance_fit;
        println!(
            "{coupling}: log2 var(Q_n) slope {:.3} (R^2 {:.3}); mean |Q_n| at level {} = {:.4}",
            f.slope,
            f.r_squared,
            study.rows.last().map_or(0, |r| r.level),
            study.rows.last().map_or(f64::NAN, |r| r.mean_norm)
        );
    }

    let mut rn_rows = Vec::new();
    for (measure, tag) in [(Coupling::Product, 1u64), (Coupling::Joint, 2)] {
        let rows = rn_degeneration_experiment(horizon, &section.rn_steps, section.rn_samples, measure, ctx.seed(RN_TAG).derive(tag))?;
        let fit = degeneration_fit(&rows);
        println!("{measure}: mean log RN slope in N {:.4} (R^2 {:.3})", fit.slope, fit.r_squared);
        let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.mean_log_rn).collect();
        io::write_plot_data(ctx.out.create(&format!("rn_degeneration_{measure}_plot.csv"))?, h, &x, &y)?;
        rn_rows.extend(rows);
    }
    let rows = rn_rows.iter().map(|r| {
        vec![
            r.n.to_string(),
            fmt_f64(r.delta_t),
            fmt_f64(r.mean_log_rn),
            fmt_f64(r.sd_log_rn),
            r.sampling_measure.to_string(),
        ]
    });
    io::write_table(
        ctx.out.create("rn_degeneration.csv")?,
        h,
        &strs(&["N", "delta_t", "mean_log_rn", "sd_log_rn", "sampling_measure"]),
        rows,
    )?;

    if let BuiltModel::Linear(lin) = &built {
        let level = section.levels.iter().copied().max().unwrap_or(12);
        let grid = Arc::new(TimeGrid::dyadic(level, horizon)?);
        let mut rows = Vec::new();
        for coupling in [Coupling::Joint, Coupling::Product] {
            let pair = simulate_pair(lin, &grid, coupling, ctx.seed(QV_TAG))?;
            let qv = empirical_qv_blocks(&pair, lin)?;
            for r in 0..qv.estimate.nrows() {
                for c in 0..qv.estimate.ncols() {
                    rows.push(vec![
                        coupling.to_string(),
                        (r + 1).to_string(),
                        (c + 1).to_string(),
                        fmt_f64(qv.estimate[(r, c)]),
                        fmt_f64(qv.standard_error[(r, c)]),
                        fmt_f64(qv.expected[(r, c)]),
                    ]);
                }
            }
        }
        io::write_table(
            ctx.out.create("qv_blocks.csv")?,
            h,
            &strs(&["coupling", "row", "col", "estimate", "standard_error", "expected"]),
            rows,
        )?;
    }
    ctx.out.print_manifest();
    Ok(())
}
