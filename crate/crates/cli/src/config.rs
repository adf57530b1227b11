//! Experiment configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jumpflow::decompose::{DecomposeConfig, MeshChart};
use jumpflow::marcus::MarcusConfig;
use jumpflow::semimartingale::{deterministic_path, sample_levy_jump_diffusion, JumpPath, PathParams};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::scenario;
use crate::studies;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub path: PathSpec,
    #[serde(default)]
    pub marcus: MarcusConfig,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub ivk: IvkSection,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Number of rungs in refinement ladders (IVK and convergence).
    #[serde(default = "default_ladder_depth")]
    pub ladder_depth: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_ladder_depth() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    /// Generator matrices for linear scenarios, one per channel, row-major.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matrices: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Number of horizontal coordinates for block-adapted decompositions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
}

impl ScenarioSpec {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), matrices: Vec::new(), initial_state: None, dim: None, split: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub time: f64,
    pub size: Vec<f64>,
}

/// The driving path: sampled, or piecewise linear through given knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Levy(PathParams),
    PiecewiseLinear {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        #[serde(default)]
        jumps: Vec<JumpSpec>,
        /// Uniform step the knots are resampled to.
        step: f64,
    },
}

impl PathSpec {
    pub fn dim(&self) -> usize {
        match self {
            PathSpec::Levy(p) => p.dim(),
            PathSpec::PiecewiseLinear { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    pub fn step(&self) -> f64 {
        match self {
            PathSpec::Levy(p) => p.step,
            PathSpec::PiecewiseLinear { step, .. } => *step,
        }
    }

    pub fn with_step(&self, h: f64) -> PathSpec {
        let mut out = self.clone();
        match &mut out {
            PathSpec::Levy(p) => p.step = h,
            PathSpec::PiecewiseLinear { step, .. } => *step = h,
        }
        out
    }

    /// Resampled at `step`. A sampled path is drawn once at `step` and kept.
    pub fn build(&self) -> Result<JumpPath> {
        match self {
            PathSpec::Levy(p) => Ok(sample_levy_jump_diffusion(p)?),
            PathSpec::PiecewiseLinear { times, values, jumps, step } => {
                let values: Vec<_> = values.iter().map(|v| DVector::from_column_slice(v)).collect();
                let jumps: Vec<_> = jumps.iter().map(|j| (j.time, DVector::from_column_slice(&j.size))).collect();
                Ok(deterministic_path(times, &values, &jumps)?.regrid(*step)?)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PathSpec::Levy(p) => p.validate().context("path")?,
            PathSpec::PiecewiseLinear { times, values, jumps, step } => {
                let m = self.dim();
                if m == 0 || values.iter().any(|v| v.len() != m) {
                    bail!("path.values: every knot needs the same positive number of channels");
                }
                if jumps.iter().any(|j| j.size.len() != m) {
                    bail!("path.jumps: jump sizes need {m} channels");
                }
                if !(*step > 0.0) {
                    bail!("path.step must be positive");
                }
                finite("path.times", times)?;
                for v in values {
                    finite("path.values", v)?;
                }
                for j in jumps {
                    finite("path.jumps", &j.size)?;
                    finite("path.jumps", &[j.time])?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecomposeMode {
    /// Matrix component equations; linear scenarios only.
    #[default]
    Linear,
    /// Mesh-based component equations in the plane.
    Pointwise,
    /// Determinant criterion along a single trajectory.
    Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub mode: DecomposeMode,
    pub settings: DecomposeConfig,
    pub mesh: MeshChart,
    /// Reference points for composition and consistency checks (pointwise mode).
    pub probes: Vec<Vec<f64>>,
    /// Write component snapshots as CSV.
    pub snapshots: bool,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        Self {
            mode: DecomposeMode::Linear,
            settings: DecomposeConfig::default(),
            mesh: MeshChart::default(),
            probes: vec![vec![1.0, 0.0], vec![0.0, 1.2], vec![-0.9, 0.4], vec![0.6, -1.1]],
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvkSection {
    /// Fields of the inner flow; the scenario supplies the outer one.
    pub companion: ScenarioSpec,
    pub base_step: f64,
    pub max_ratio: f64,
    pub residual_floor: f64,
}

impl Default for IvkSection {
    fn default() -> Self {
        Self { companion: ScenarioSpec::named("zero"), base_step: 0.01, max_ratio: 0.6, residual_floor: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub study: String,
    /// Coarsest time step, or coarsest substep count for flow studies.
    pub base_step: f64,
    pub base_substeps: usize,
    pub paths: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self { study: "marcus-deterministic".into(), base_step: 0.01, base_substeps: 4, paths: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub paths: usize,
    /// Histogram bins over `[0, horizon)` for stopping times.
    pub bins: usize,
    pub stopping_times: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { paths: 100, bins: 20, stopping_times: false }
    }
}

fn finite(what: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        bail!("{what}: non-finite value {v}");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        scenario::lookup(&self.scenario.name)?;
        scenario::lookup(&self.ivk.companion.name).context("ivk.companion")?;
        studies::lookup(&self.convergence.study)?;
        self.path.validate()?;
        for (i, m) in self.scenario.matrices.iter().enumerate() {
            for row in m {
                finite(&format!("scenario.matrices[{i}]"), row)?;
            }
        }
        if let Some(x0) = &self.scenario.initial_state {
            finite("scenario.initial_state", x0)?;
        }
        for p in &self.decompose.probes {
            finite("decompose.probes", p)?;
        }
        let positive = [
            ("ivk.base_step", self.ivk.base_step),
            ("ivk.max_ratio", self.ivk.max_ratio),
            ("convergence.base_step", self.convergence.base_step),
        ];
        for (what, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bail!("{what} must be positive and finite, got {v}");
            }
        }
        if self.ladder_depth < 2 {
            bail!("ladder_depth must be at least 2");
        }
        if self.ensemble.paths == 0 || self.ensemble.bins == 0 || self.convergence.paths == 0 {
            bail!("ensemble.paths, ensemble.bins and convergence.paths must be positive");
        }
        self.marcus.ode.validate()?;
        Ok(())
    }

    /// Applies a `--seed` override to the sampled path.
    pub fn override_seed(&mut self, seed: u64) {
        if let PathSpec::Levy(p) = &mut self.path {
            p.seed = seed;
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match &self.path {
            PathSpec::Levy(p) => Some(p.seed),
            PathSpec::PiecewiseLinear { .. } => None,
        }
    }
}
