use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use super::{solve_point, MarcusConfig, Trajectory};
use crate::error::{Error, Result};
use crate::odeflow::VectorFieldSet;
use crate::semimartingale::{derive_seed, sample_levy_jump_diffusion, uniform_grid, JumpPath, PathParams};

/// Scalar read-out `f(t, x_t)` averaged over the ensemble at each sample time.
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    pub f: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
}

impl Observable {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

/// One scalar per path (for instance a stopping time); collected in path
/// order rather than averaged.
#[derive(Clone)]
pub struct PathScalar {
    pub name: String,
    pub f: Arc<dyn Fn(&Trajectory, &JumpPath) -> Option<f64> + Send + Sync>,
}

impl PathScalar {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&Trajectory, &JumpPath) -> Option<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

#[derive(Clone, Default)]
pub struct EnsembleOptions {
    pub observables: Vec<Observable>,
    pub path_scalars: Vec<PathScalar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries {
    pub name: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    /// Unbiased sample variance per coordinate; zero for a single path.
    pub variance: Vec<DVector<f64>>,
    pub observables: Vec<ScalarSeries>,
    /// `(name, per-path values)`; `None` where the scalar was undefined or
    /// the path failed.
    pub path_scalars: Vec<(String, Vec<Option<f64>>)>,
    pub n_paths: usize,
    pub completed: usize,
    pub failures: usize,
}

struct PathResult {
    states: Vec<DVector<f64>>,
    observables: Vec<Vec<f64>>,
    scalars: Vec<Option<f64>>,
}

#[derive(Clone)]
struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: DVector::zeros(dim), m2: DVector::zeros(dim) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += delta.component_mul(&delta2);
    }

    fn variance(&self) -> DVector<f64> {
        if self.n < 2 {
            DVector::zeros(self.mean.len())
        } else {
            &self.m2 / (self.n - 1) as f64
        }
    }
}

/// Solves `n_paths` independent paths, path `i` seeded with
/// `derive_seed(params.seed, i)`, and aggregates at the uniform sample times
/// `k * step`. Paths are solved in parallel and reduced in index order, so
/// the summary is bit-identical for a given master seed.
pub fn solve_ensemble(
    fields: &dyn VectorFieldSet,
    params: &PathParams,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
    n_paths: usize,
    options: &EnsembleOptions,
) -> Result<EnsembleSummary> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be at least 1".into()));
    }
    params.validate()?;
    let times = uniform_grid(params.horizon, params.step);

    let run = |i: usize| -> Result<PathResult> {
        let path_params = PathParams { seed: derive_seed(params.seed, i as u64), ..params.clone() };
        let z = sample_levy_jump_diffusion(&path_params)?;
        let traj = solve_point(fields, &z, x0, cfg)?;
        let states = times.iter().map(|&t| traj.value_at(t)).collect::<Result<Vec<_>>>()?;
        let observables = options
            .observables
            .iter()
            .map(|o| times.iter().zip(&states).map(|(&t, x)| (o.f)(t, x)).collect())
            .collect();
        let scalars = options.path_scalars.iter().map(|s| (s.f)(&traj, &z)).collect();
        Ok(PathResult { states, observables, scalars })
    };
    let results: Vec<Result<PathResult>> = (0..n_paths).into_par_iter().map(run).collect();

    let n = x0.len();
    let mut states = vec![Welford::new(n); times.len()];
    let mut obs = vec![vec![Welford::new(1); times.len()]; options.observables.len()];
    let mut scalars: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n_paths); options.path_scalars.len()];
    let mut failures = 0;
    for result in results {
        match result {
            Ok(r) => {
                for (acc, x) in states.iter_mut().zip(&r.states) {
                    acc.push(x);
                }
                for (series, values) in obs.iter_mut().zip(&r.observables) {
                    for (acc, &v) in series.iter_mut().zip(values) {
                        acc.push(&DVector::from_element(1, v));
                    }
                }
                for (column, value) in scalars.iter_mut().zip(r.scalars) {
                    column.push(value);
                }
            }
            Err(Error::IntegrationFailure { .. }) => {
                failures += 1;
                for column in scalars.iter_mut() {
                    column.push(None);
                }
            }
            Err(other) => return Err(other),
        }
    }

    Ok(EnsembleSummary {
        mean: states.iter().map(|w| w.mean.clone()).collect(),
        variance: states.iter().map(Welford::variance).collect(),
        observables: options
            .observables
            .iter()
            .zip(&obs)
            .map(|(o, series)| ScalarSeries {
                name: o.name.clone(),
                mean: series.iter().map(|w| w.mean[0]).collect(),
                variance: series.iter().map(|w| w.variance()[0]).collect(),
            })
            .collect(),
        path_scalars: options.path_scalars.iter().map(|s| s.name.clone()).zip(scalars).collect(),
        times,
        n_paths,
        completed: n_paths - failures,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::{FnFields, LinearFields};
    use crate::semimartingale::JumpLaw;
    use nalgebra::DMatrix;

    fn brownian(seed: u64, step: f64) -> PathParams {
        PathParams {
            horizon: 1.0,
            step,
            brownian_scale: vec![1.0],
            drift: vec![0.0],
            jump_intensity: 0.0,
            jump_law: JumpLaw::Constant { size: vec![0.0] },
            seed,
        }
    }

    #[test]
    fn single_path_equals_direct_solve() {
        let fields = LinearFields::new(vec![DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])]).unwrap();
        let params = PathParams { jump_intensity: 2.0, jump_law: JumpLaw::Constant { size: vec![0.5] }, ..brownian(9, 0.01) };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = MarcusConfig::default();
        let summary = solve_ensemble(&fields, &params, &x0, &cfg, 1, &EnsembleOptions::default()).unwrap();
        let z = sample_levy_jump_diffusion(&PathParams { seed: derive_seed(9, 0), ..params }).unwrap();
        let traj = solve_point(&fields, &z, &x0, &cfg).unwrap();
        for (k, &t) in summary.times.iter().enumerate() {
            assert_eq!(summary.mean[k], traj.value_at(t).unwrap());
            assert!(summary.variance[k].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_fields_zero_variance() {
        let summary = solve_ensemble(
            &LinearFields::zero(2, 1),
            &brownian(1, 0.05),
            &DVector::from_vec(vec![0.5, 1.0]),
            &MarcusConfig::default(),
            64,
            &EnsembleOptions::default(),
        )
        .unwrap();
        assert!(summary.variance.iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn deterministic_given_master_seed() {
        let fields = FnFields::new(1).with_fd_field(|x| DVector::from_vec(vec![x[0].cos()]));
        let opts = EnsembleOptions {
            observables: vec![Observable::new("sq", |_, x| x[0] * x[0])],
            path_scalars: vec![PathScalar::new("final", |traj, _| Some(traj.final_state()[0]))],
        };
        let run = || {
            solve_ensemble(&fields, &brownian(77, 0.01), &DVector::from_vec(vec![0.1]), &MarcusConfig::default(), 50, &opts)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn failures_are_counted() {
        // x' = x^2 driven by a positive jump blows up on paths with a jump.
        let fields = FnFields::new(1).with_fd_field(|x| DVector::from_vec(vec![x[0] * x[0]]));
        let params = PathParams {
            brownian_scale: vec![0.0],
            jump_intensity: 1.0,
            jump_law: JumpLaw::Constant { size: vec![5.0] },
            ..brownian(3, 0.1)
        };
        let summary =
            solve_ensemble(&fields, &params, &DVector::from_vec(vec![1.0]), &MarcusConfig::default(), 40, &EnsembleOptions::default())
                .unwrap();
        assert!(summary.failures > 0 && summary.failures < 40);
        assert_eq!(summary.completed + summary.failures, 40);
    }
}
