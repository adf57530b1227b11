//! Convergence studies: error ladders against registered references.

use anyhow::{anyhow, bail, Context, Result};
use jumpflow::convergence::{dyadic_ladder, fit_order};
use jumpflow::marcus::solve_point;
use jumpflow::odeflow::{flow, OdeConfig};
use jumpflow::reference::matrix_exp;
use jumpflow::semimartingale::{derive_seed, sample_levy_jump_diffusion, JumpLaw, JumpPath, PathParams};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PathSpec};
use crate::scenario::{self, Model};

/// Errors measured on one ladder, coarsest first.
pub struct Ladder {
    /// What `steps` holds.
    pub parameter: &'static str,
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
}

pub trait ConvergenceStudy: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    /// Smallest fitted order accepted.
    fn min_order(&self) -> f64;
    fn measure(&self, cfg: &ExperimentConfig) -> Result<Ladder>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub study: String,
    pub parameter: String,
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: f64,
    pub pairwise_orders: Vec<f64>,
    pub min_order: f64,
    pub passed: bool,
}

pub fn registry() -> &'static [&'static dyn ConvergenceStudy] {
    &[&MarcusDeterministic, &OdeFlow, &BrownianStrong]
}

pub fn lookup(name: &str) -> Result<&'static dyn ConvergenceStudy> {
    registry().iter().copied().find(|s| s.name() == name).ok_or_else(|| {
        let known: Vec<_> = registry().iter().map(|s| s.name()).collect();
        anyhow!("unknown convergence study {name:?} (known: {})", known.join(", "))
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let study = lookup(&cfg.convergence.study)?;
    let ladder = study.measure(cfg)?;
    let fit = fit_order(&ladder.steps, &ladder.errors).context("fitting the error ladder")?;
    Ok(StudyReport {
        study: study.name().into(),
        parameter: ladder.parameter.into(),
        steps: ladder.steps,
        errors: ladder.errors,
        order: fit.order,
        pairwise_orders: fit.pairwise,
        min_order: study.min_order(),
        passed: fit.order >= study.min_order(),
    })
}

fn linear_model(cfg: &ExperimentConfig, channels: usize) -> Result<(Model, DMatrix<f64>)> {
    let model = scenario::build(&cfg.scenario, channels)?;
    let a = model
        .single_generator()
        .cloned()
        .ok_or_else(|| anyhow!("study {} needs a one-channel linear scenario", cfg.convergence.study))?;
    Ok((model, a))
}

/// `sup |x - e^{A (Z - Z_0)} x0|` over grid values and left limits.
pub fn sup_error_vs_exponential(model: &Model, a: &DMatrix<f64>, z: &JumpPath, cfg: &ExperimentConfig) -> Result<f64> {
    let x0 = &model.x0;
    let traj = solve_point(&*model.fields, z, x0, &cfg.marcus)?;
    let z0 = z.value_at_index(0)[0];
    let mut sup: f64 = 0.0;
    for k in 0..z.len() {
        let post = matrix_exp(a, z.value_at_index(k)[0] - z0).value * x0;
        let pre = matrix_exp(a, z.left_limit_at_index(k)[0] - z0).value * x0;
        sup = sup.max((traj.post(k) - post).amax()).max((traj.pre(k) - pre).amax());
    }
    Ok(sup)
}

struct MarcusDeterministic;

impl ConvergenceStudy for MarcusDeterministic {
    fn name(&self) -> &'static str {
        "marcus-deterministic"
    }

    fn summary(&self) -> &'static str {
        "linear system on a piecewise-linear driver against the exponential solution"
    }

    fn min_order(&self) -> f64 {
        1.8
    }

    fn measure(&self, cfg: &ExperimentConfig) -> Result<Ladder> {
        if !matches!(cfg.path, PathSpec::PiecewiseLinear { .. }) {
            bail!("study {} needs a piecewise_linear path", self.name());
        }
        let (model, a) = linear_model(cfg, cfg.path.dim())?;
        let steps = dyadic_ladder(cfg.convergence.base_step, cfg.ladder_depth);
        let errors = steps
            .par_iter()
            .map(|&h| sup_error_vs_exponential(&model, &a, &cfg.path.with_step(h).build()?, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ladder { parameter: "h", steps, errors })
    }
}

struct OdeFlow;

impl ConvergenceStudy for OdeFlow {
    fn name(&self) -> &'static str {
        "ode-flow"
    }

    fn summary(&self) -> &'static str {
        "unit-time jump flow with unit weights against a fine or exponential reference"
    }

    fn min_order(&self) -> f64 {
        3.5
    }

    fn measure(&self, cfg: &ExperimentConfig) -> Result<Ladder> {
        let model = scenario::build(&cfg.scenario, cfg.path.dim())?;
        let weights = DVector::from_element(model.fields.count(), 1.0);
        let generic = |substeps: usize| OdeConfig { substeps, linear_fast_path: false, ..OdeConfig::default() };
        let counts: Vec<usize> = (0..cfg.ladder_depth).map(|r| cfg.convergence.base_substeps << r).collect();
        let reference = match model.fields.combined_linear(&weights) {
            Some(a) => matrix_exp(&a, 1.0).value * &model.x0,
            None => flow(&*model.fields, &weights, &model.x0, 1.0, &generic(counts[counts.len() - 1] * 16))?,
        };
        let errors = counts
            .iter()
            .map(|&s| Ok((flow(&*model.fields, &weights, &model.x0, 1.0, &generic(s))? - &reference).amax()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ladder { parameter: "substep", steps: counts.iter().map(|&s| 1.0 / s as f64).collect(), errors })
    }
}

struct BrownianStrong;

impl ConvergenceStudy for BrownianStrong {
    fn name(&self) -> &'static str {
        "brownian-strong"
    }

    fn summary(&self) -> &'static str {
        "mean terminal error over sampled paths against the exponential solution"
    }

    fn min_order(&self) -> f64 {
        0.45
    }

    fn measure(&self, cfg: &ExperimentConfig) -> Result<Ladder> {
        let steps = dyadic_ladder(cfg.convergence.base_step, cfg.ladder_depth);
        let finest = steps[steps.len() - 1];
        let params = match &cfg.path {
            PathSpec::Levy(p) => PathParams { step: finest, ..p.clone() },
            PathSpec::PiecewiseLinear { .. } => PathParams {
                horizon: 1.0,
                step: finest,
                brownian_scale: vec![1.0],
                drift: vec![0.0],
                jump_intensity: 0.0,
                jump_law: JumpLaw::Constant { size: vec![0.0] },
                seed: 0,
            },
        };
        let (model, a) = linear_model(cfg, params.dim())?;
        let n = cfg.convergence.paths;
        let per_path = (0..n)
            .into_par_iter()
            .map(|i| {
                let fine = sample_levy_jump_diffusion(&PathParams { seed: derive_seed(params.seed, i as u64), ..params.clone() })?;
                let exact = matrix_exp(&a, fine.value_at_index(fine.len() - 1)[0] - fine.value_at_index(0)[0]).value * &model.x0;
                steps
                    .iter()
                    .map(|&h| {
                        let z = fine.regrid(h)?;
                        let traj = solve_point(&*model.fields, &z, &model.x0, &cfg.marcus)?;
                        Ok((traj.final_state() - &exact).norm())
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let errors = (0..steps.len()).map(|r| per_path.iter().map(|e| e[r]).sum::<f64>() / n as f64).collect();
        Ok(Ladder { parameter: "h", steps, errors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|s| s.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), registry().len());
        assert!(lookup("marcus-deterministic").is_ok());
        assert!(lookup("weak").is_err());
    }
}
