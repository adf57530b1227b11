//! One function per subcommand. Each returns its artifacts and a status;
//! nothing here touches the file system.

use anyhow::{anyhow, bail, ensure, Result};
use jumpflow::decompose::{
    decompose_linear_sde, decompose_pointwise, validity_monitor, verify_composition, DecompositionRecord, LinearSystem,
    StepDiagnostics, StopReason, StructuredMesh,
};
use jumpflow::marcus::{solve_ensemble, solve_point, solve_with_jacobian, EnsembleOptions, Observable, PathScalar};
use jumpflow::reference::matrix_exp;
use jumpflow::semimartingale::PathParams;
use jumpflow::stratjump::{verify_ivk, IvkConfig, LadderReport};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{DecomposeMode, ExperimentConfig, PathSpec};
use crate::output::Artifact;
use crate::scenario::{self, Model};
use crate::studies;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Decompose,
    VerifyIvk,
    Convergence,
    Ensemble,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Decompose => "decompose",
            Command::VerifyIvk => "verify-ivk",
            Command::Convergence => "convergence",
            Command::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Success,
    /// A checked property failed; the message says which.
    PropertyViolation(String),
    /// The decomposition stopped before the horizon.
    StoppedAtTau(f64),
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub status: Status,
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    match command {
        Command::Simulate => run_simulate(cfg),
        Command::Decompose => run_decompose(cfg),
        Command::VerifyIvk => run_verify_ivk(cfg),
        Command::Convergence => run_convergence(cfg),
        Command::Ensemble => run_ensemble(cfg),
    }
}

fn model(cfg: &ExperimentConfig) -> Result<Model> {
    scenario::build(&cfg.scenario, cfg.path.dim())
}

fn max(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

#[derive(Serialize)]
struct InvariantDrift {
    name: &'static str,
    initial: f64,
    max_drift: f64,
}

#[derive(Serialize)]
struct SimulateSummary {
    scenario: String,
    grid_points: usize,
    jump_count: usize,
    final_time: f64,
    initial_state: Vec<f64>,
    final_state: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    invariant: Option<InvariantDrift>,
    /// Sup-norm distance to the exponential solution (one-channel linear
    /// scenarios).
    #[serde(skip_serializing_if = "Option::is_none")]
    exponential_sup_error: Option<f64>,
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = model(cfg)?;
    let z = cfg.path.build()?;
    let traj = solve_point(&*model.fields, &z, &model.x0, &cfg.marcus)?;
    let invariant = model.invariant.map(|inv| {
        let initial = (inv.eval)(&model.x0);
        let drift = (0..traj.len()).flat_map(|k| [traj.pre(k), traj.post(k)]).map(|x| ((inv.eval)(x) - initial).abs());
        InvariantDrift { name: inv.name, initial, max_drift: max(drift) }
    });
    let exponential_sup_error = match model.single_generator() {
        Some(a) => Some(studies::sup_error_vs_exponential(&model, a, &z, cfg)?),
        None => None,
    };
    let summary = SimulateSummary {
        scenario: cfg.scenario.name.clone(),
        grid_points: z.len(),
        jump_count: z.jumps().len(),
        final_time: traj.final_time(),
        initial_state: model.x0.iter().copied().collect(),
        final_state: traj.final_state().iter().copied().collect(),
        invariant,
        exponential_sup_error,
    };
    Ok(Outcome {
        artifacts: vec![
            Artifact::text("path.csv", z.to_csv()),
            Artifact::text("trajectory.csv", traj.to_csv()),
            Artifact::json("summary.json", "simulate", &summary)?,
        ],
        status: Status::Success,
    })
}

#[derive(Serialize)]
struct DecomposeSummary {
    scenario: String,
    mode: DecomposeMode,
    horizon: f64,
    tau: f64,
    stop: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_detail: Option<String>,
    reached_horizon: bool,
    recorded_steps: usize,
    max_residual_sup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_psi_consistency: Option<f64>,
    refactored_jumps: usize,
    /// Composition residual against the exponential flow, when the scenario
    /// has a single linear generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    exponential_residual: Option<f64>,
}

#[derive(Serialize)]
struct MonitorSummary {
    scenario: String,
    mode: DecomposeMode,
    horizon: f64,
    tau: f64,
    reached_horizon: bool,
    min_abs_det: f64,
}

#[derive(Serialize)]
struct MonitorRow {
    t: f64,
    det_pre: f64,
    det_post: f64,
}

pub fn run_decompose(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = model(cfg)?;
    let z = cfg.path.build()?;
    let section = &cfg.decompose;
    let mut settings = section.settings.clone();
    settings.marcus = cfg.marcus.clone();

    if section.mode == DecomposeMode::Monitor {
        let traj = solve_with_jacobian(&*model.fields, &z, &model.x0, &cfg.marcus)?;
        let report = validity_monitor(&traj, &model.chart, settings.thresholds.eps_det)?;
        let rows: Vec<_> = (0..report.times.len())
            .map(|k| MonitorRow { t: report.times[k], det_pre: report.det_pre[k], det_post: report.det_post[k] })
            .collect();
        let summary = MonitorSummary {
            scenario: cfg.scenario.name.clone(),
            mode: section.mode,
            horizon: z.horizon(),
            tau: report.tau,
            reached_horizon: report.tau_index.is_none(),
            min_abs_det: report.det_pre.iter().chain(&report.det_post).map(|d| d.abs()).fold(f64::INFINITY, f64::min),
        };
        let status = match report.tau_index {
            None => Status::Success,
            Some(_) => Status::StoppedAtTau(report.tau),
        };
        return Ok(Outcome {
            artifacts: vec![
                Artifact::json_lines("monitor.jsonl", &rows)?,
                Artifact::json("decompose.json", "decompose", &summary)?,
            ],
            status,
        });
    }

    let (record, probes) = match section.mode {
        DecomposeMode::Linear => {
            let generators =
                model.generators.clone().ok_or_else(|| anyhow!("linear decomposition needs a linear scenario"))?;
            let sys = LinearSystem::new(generators, model.split)?;
            let n = model.dim();
            let probes: Vec<_> = (0..n).map(|i| DMatrix::<f64>::identity(n, n).column(i).into_owned()).collect();
            (decompose_linear_sde(&sys, &z, &settings)?, probes)
        }
        DecomposeMode::Pointwise => {
            let mesh = StructuredMesh::new(section.mesh)?;
            let probes: Vec<_> = section.probes.iter().map(|p| DVector::from_column_slice(p)).collect();
            ensure!(probes.iter().all(|p| p.len() == model.dim()), "decompose.probes must match the state dimension");
            (decompose_pointwise(&*model.fields, &model.pair, &z, &mesh, &probes, &settings)?, probes)
        }
        DecomposeMode::Monitor => unreachable!(),
    };

    let exponential_residual = match model.single_generator() {
        Some(a) => {
            let z0 = z.value_at_index(0)[0];
            let flow = |k: usize, x: &DVector<f64>| Ok(matrix_exp(a, z.value_at_index(k)[0] - z0).value * x);
            Some(max(verify_composition(&record, &probes, &flow)?))
        }
        None => None,
    };
    let summary = DecomposeSummary {
        scenario: cfg.scenario.name.clone(),
        mode: section.mode,
        horizon: z.horizon(),
        tau: record.tau,
        stop: record.stop,
        stop_detail: record.stop_detail.clone(),
        reached_horizon: record.reached_horizon(),
        recorded_steps: record.times.len(),
        max_residual_sup: max(record.diagnostics.iter().map(|d| d.residual_sup)),
        max_psi_consistency: record
            .diagnostics
            .iter()
            .map(|d| d.psi_consistency)
            .collect::<Option<Vec<_>>>()
            .map(|v| max(v)),
        refactored_jumps: record.refactored_jumps,
        exponential_residual,
    };
    let mut artifacts = vec![
        Artifact::json_lines::<StepDiagnostics>("diagnostics.jsonl", &record.diagnostics)?,
        Artifact::json("decompose.json", "decompose", &summary)?,
    ];
    if section.snapshots {
        artifacts.extend(snapshot_files(&record));
    }
    let status = if record.reached_horizon() { Status::Success } else { Status::StoppedAtTau(record.tau) };
    Ok(Outcome { artifacts, status })
}

fn snapshot_files(record: &DecompositionRecord) -> Vec<Artifact> {
    vec![
        Artifact::text("xi.csv", record.snapshots_csv(&record.xi)),
        Artifact::text("psi.csv", record.snapshots_csv(&record.psi)),
    ]
}

#[derive(Serialize)]
struct IvkSummary<'a> {
    scenario: String,
    companion: String,
    #[serde(flatten)]
    report: &'a LadderReport,
}

pub fn run_verify_ivk(cfg: &ExperimentConfig) -> Result<Outcome> {
    let outer = model(cfg)?;
    let inner = scenario::build(&cfg.ivk.companion, cfg.path.dim())?;
    ensure!(outer.dim() == inner.dim(), "scenario and ivk.companion must share the state dimension");
    let ivk = IvkConfig {
        marcus: cfg.marcus.clone(),
        base_step: cfg.ivk.base_step,
        rungs: cfg.ladder_depth,
        max_ratio: cfg.ivk.max_ratio,
        residual_floor: cfg.ivk.residual_floor,
    };
    let z = cfg.path.build()?;
    let report = verify_ivk(&*outer.fields, &*inner.fields, &z, &outer.x0, &ivk)?;
    let status = if report.decay_ok {
        Status::Success
    } else {
        Status::PropertyViolation(format!("residual ratios {:?} exceed {}", report.ratios, report.max_ratio))
    };
    let summary =
        IvkSummary { scenario: cfg.scenario.name.clone(), companion: cfg.ivk.companion.name.clone(), report: &report };
    Ok(Outcome { artifacts: vec![Artifact::json("ivk.json", "verify-ivk", &summary)?], status })
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let report = studies::run(cfg)?;
    let status = if report.passed {
        Status::Success
    } else {
        Status::PropertyViolation(format!("{} order {:.3} below {}", report.study, report.order, report.min_order))
    };
    Ok(Outcome { artifacts: vec![Artifact::json("convergence.json", "convergence", &report)?], status })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Paths that reached the horizon (or failed) without a value.
    pub censored: usize,
}

impl Histogram {
    pub fn new(values: &[Option<f64>], horizon: f64, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|b| horizon * b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        let mut censored = 0;
        for v in values {
            match v {
                Some(t) if *t < horizon => counts[((t / horizon * bins as f64) as usize).min(bins - 1)] += 1,
                _ => censored += 1,
            }
        }
        Self { edges, counts, censored }
    }
}

#[derive(Serialize)]
struct StoppingTimes {
    histogram: Histogram,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_histogram: Option<Histogram>,
    /// Fraction of paths whose stopping time is within one grid step of the
    /// closed-form one (both censored counts as agreement).
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_agreement: Option<f64>,
}

#[derive(Serialize)]
struct SeriesOut {
    name: String,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

#[derive(Serialize)]
struct EnsembleOut {
    scenario: String,
    master_seed: u64,
    n_paths: usize,
    completed: usize,
    failures: usize,
    times: Vec<f64>,
    mean: Vec<Vec<f64>>,
    variance: Vec<Vec<f64>>,
    observables: Vec<SeriesOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stopping_times: Option<StoppingTimes>,
}

pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<Outcome> {
    let PathSpec::Levy(params) = &cfg.path else {
        bail!("ensemble needs a levy path");
    };
    let model = model(cfg)?;
    let mut options = EnsembleOptions::default();
    if let Some(inv) = model.invariant {
        options.observables.push(Observable::new(inv.name, move |_, x| (inv.eval)(x)));
    }
    let mut marcus = cfg.marcus.clone();
    let eps = cfg.decompose.settings.thresholds.eps_det;
    if cfg.ensemble.stopping_times {
        marcus.record_jacobian = true;
        let chart = model.chart.clone();
        options.path_scalars.push(PathScalar::new("tau", move |traj, _| {
            validity_monitor(traj, &chart, eps).ok().and_then(|r| r.tau_index.map(|_| r.tau))
        }));
        if let Some(oracle) = model.stopping_oracle {
            options.path_scalars.push(PathScalar::new("tau_oracle", move |_, z| oracle(z)));
        }
    }
    let summary = solve_ensemble(&*model.fields, params, &model.x0, &marcus, cfg.ensemble.paths, &options)?;
    let stopping_times = cfg.ensemble.stopping_times.then(|| stopping_summary(&summary.path_scalars, params, cfg.ensemble.bins));
    let out = EnsembleOut {
        scenario: cfg.scenario.name.clone(),
        master_seed: params.seed,
        n_paths: summary.n_paths,
        completed: summary.completed,
        failures: summary.failures,
        times: summary.times.clone(),
        mean: summary.mean.iter().map(|v| v.iter().copied().collect()).collect(),
        variance: summary.variance.iter().map(|v| v.iter().copied().collect()).collect(),
        observables: summary
            .observables
            .iter()
            .map(|s| SeriesOut { name: s.name.clone(), mean: s.mean.clone(), variance: s.variance.clone() })
            .collect(),
        stopping_times,
    };
    let status = if summary.failures > 0 {
        Status::PropertyViolation(format!("{} of {} paths failed", summary.failures, summary.n_paths))
    } else {
        Status::Success
    };
    Ok(Outcome { artifacts: vec![Artifact::json("ensemble.json", "ensemble", &out)?], status })
}

fn stopping_summary(scalars: &[(String, Vec<Option<f64>>)], params: &PathParams, bins: usize) -> StoppingTimes {
    let column = |name: &str| scalars.iter().find(|(n, _)| n == name).map(|(_, v)| v);
    let tau = column("tau").expect("tau column requested");
    let oracle = column("tau_oracle");
    let agreement = oracle.map(|o| {
        let hits = tau
            .iter()
            .zip(o)
            .filter(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= params.step * (1.0 + 1e-9),
                (None, None) => true,
                _ => false,
            })
            .count();
        hits as f64 / tau.len() as f64
    });
    StoppingTimes {
        histogram: Histogram::new(tau, params.horizon, bins),
        oracle_histogram: oracle.map(|o| Histogram::new(o, params.horizon, bins)),
        oracle_agreement: agreement,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_and_censoring() {
        let h = Histogram::new(&[Some(0.05), Some(0.5), Some(0.99), Some(1.0), None], 1.0, 4);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
        assert_eq!(h.censored, 2);
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
