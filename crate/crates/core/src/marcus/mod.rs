//! Marcus canonical equations `dx = Σ_i X^i(x) ◇ dZ^i`.
//!
//! Continuous grid intervals take one Heun step. At a jump time `s` the state
//! moves from `x_{s-}` to `φ(X·ΔZ_s, x_{s-}, 1)`. Jacobians, when requested,
//! follow the variational Heun step and the variational jump flow.

mod ensemble;

pub use ensemble::{solve_ensemble, EnsembleOptions, EnsembleSummary, Observable, PathScalar, ScalarSeries};

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeflow::{self, DrivenSystem, OdeConfig, VectorFieldSet};
use crate::semimartingale::JumpPath;

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StratonovichScheme {
    #[default]
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MarcusConfig {
    pub ode: OdeConfig,
    pub scheme: StratonovichScheme,
    pub record_jacobian: bool,
}

/// Càdlàg solution record. Index `k` refers to the driving path's grid point
/// `t_k`; `pre(k)` is `x_{t_k -}` and `post(k)` is `x_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
    is_jump: Vec<bool>,
    jac_pre: Option<Vec<DMatrix<f64>>>,
    jac_post: Option<Vec<DMatrix<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn pre(&self, k: usize) -> &DVector<f64> {
        &self.pre[k]
    }

    pub fn post(&self, k: usize) -> &DVector<f64> {
        &self.post[k]
    }

    pub fn is_jump(&self, k: usize) -> bool {
        self.is_jump[k]
    }

    pub fn has_jacobians(&self) -> bool {
        self.jac_post.is_some()
    }

    pub fn jacobian_pre(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.jac_pre.as_ref().map(|j| &j[k]).ok_or(Error::MissingJacobians)
    }

    pub fn jacobian_post(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.jac_post.as_ref().map(|j| &j[k]).ok_or(Error::MissingJacobians)
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.post.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.final_time();
        if !(t >= 0.0 && t <= end * (1.0 + 1e-12) + 1e-12) {
            return Err(Error::TimeOutOfRange { time: t, horizon: end });
        }
        let k = self.times.partition_point(|&s| s < t - 1e-12 * (1.0 + t.abs()));
        Ok((k.min(self.len() - 1), t))
    }

    /// `x_t`. Between grid points the state is interpolated linearly from
    /// `post(k-1)` to `pre(k)`.
    pub fn value_at(&self, t: f64) -> Result<DVector<f64>> {
        let (k, t) = self.locate(t)?;
        if (self.times[k] - t).abs() <= 1e-12 * (1.0 + t.abs()) {
            return Ok(self.post[k].clone());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Ok(&self.post[k - 1] * (1.0 - w) + &self.pre[k] * w)
    }

    /// `x_{t-}`.
    pub fn left_limit_at(&self, t: f64) -> Result<DVector<f64>> {
        let (k, t) = self.locate(t)?;
        if (self.times[k] - t).abs() <= 1e-12 * (1.0 + t.abs()) {
            return Ok(self.pre[k].clone());
        }
        self.value_at(t)
    }

    /// Columns `time, pre_1..pre_n, post_1..post_n, is_jump`, then optional
    /// Jacobian columns `jpre_ij`, `jpost_ij` in row-major order.
    pub fn to_csv(&self) -> String {
        let n = self.pre[0].len();
        let mut out = String::new();
        let _ = writeln!(out, "# jumpflow-trajectory format_version={TRAJECTORY_FORMAT_VERSION}");
        out.push_str("time");
        for prefix in ["pre", "post"] {
            for i in 1..=n {
                let _ = write!(out, ",{prefix}_{i}");
            }
        }
        out.push_str(",is_jump");
        if self.has_jacobians() {
            for prefix in ["jpre", "jpost"] {
                for i in 1..=n {
                    for j in 1..=n {
                        let _ = write!(out, ",{prefix}_{i}{j}");
                    }
                }
            }
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.times[k]);
            for v in self.pre[k].iter().chain(self.post[k].iter()) {
                let _ = write!(out, ",{v}");
            }
            let _ = write!(out, ",{}", u8::from(self.is_jump[k]));
            if let (Some(a), Some(b)) = (&self.jac_pre, &self.jac_post) {
                for m in [&a[k], &b[k]] {
                    for i in 0..n {
                        for j in 0..n {
                            let _ = write!(out, ",{}", m[(i, j)]);
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn finite_or_fail(x: &DVector<f64>, time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { time })
    }
}

/// One Heun step `x + ½(X(x) + X(x̂))dz` with `x̂ = x + X(x)dz`.
pub fn heun_step(fields: &dyn VectorFieldSet, x: &DVector<f64>, dz: &DVector<f64>) -> DVector<f64> {
    let f0 = fields.combine(dz, x);
    let predictor = x + &f0;
    let f1 = fields.combine(dz, &predictor);
    x + (f0 + f1) * 0.5
}

/// Heun step for the state and its Jacobian.
pub fn heun_step_with_jacobian(
    fields: &dyn VectorFieldSet,
    x: &DVector<f64>,
    jac: &DMatrix<f64>,
    dz: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let f0 = fields.combine(dz, x);
    let j0 = fields.combine_jacobian(dz, x);
    let predictor = x + &f0;
    let f1 = fields.combine(dz, &predictor);
    let j1 = fields.combine_jacobian(dz, &predictor);
    let j0j = &j0 * jac;
    let dpred = jac + &j0j;
    let jac_new = jac + (j0j + j1 * dpred) * 0.5;
    (x + (f0 + f1) * 0.5, jac_new)
}

/// Heun step for a [`DrivenSystem`].
pub fn heun_step_driven(sys: &dyn DrivenSystem, x: &DVector<f64>, dz: &DVector<f64>) -> Result<DVector<f64>> {
    let f0 = sys.drive(x, dz)?;
    let predictor = x + &f0;
    let f1 = sys.drive(&predictor, dz)?;
    Ok(x + (f0 + f1) * 0.5)
}

fn check_problem(fields: &dyn VectorFieldSet, z: &JumpPath, x0: &DVector<f64>) -> Result<()> {
    if fields.count() != z.dim() {
        return Err(Error::DimensionMismatch { expected: fields.count(), got: z.dim() });
    }
    if x0.len() != fields.dim() {
        return Err(Error::DimensionMismatch { expected: fields.dim(), got: x0.len() });
    }
    Ok(())
}

/// Solves on the grid prefix `t_0..=t_end`.
pub fn solve_prefix(
    fields: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
    end: usize,
) -> Result<Trajectory> {
    check_problem(fields, z, x0)?;
    cfg.ode.validate()?;
    if end >= z.len() {
        return Err(Error::InvalidParameter(format!("end index {end} beyond path of length {}", z.len())));
    }
    let n = fields.dim();
    let record = cfg.record_jacobian;
    let mut times = Vec::with_capacity(end + 1);
    let mut pre = Vec::with_capacity(end + 1);
    let mut post = Vec::with_capacity(end + 1);
    let mut is_jump = Vec::with_capacity(end + 1);
    let mut jac_pre = Vec::new();
    let mut jac_post = Vec::new();

    let mut x = x0.clone();
    let mut jac = DMatrix::identity(n, n);
    times.push(z.times()[0]);
    pre.push(x.clone());
    post.push(x.clone());
    is_jump.push(false);
    if record {
        jac_pre.push(jac.clone());
        jac_post.push(jac.clone());
    }

    for k in 1..=end {
        let t = z.times()[k];
        let dz = z.continuous_increment(k);
        if dz.iter().any(|v| *v != 0.0) {
            if record {
                let (nx, nj) = heun_step_with_jacobian(fields, &x, &jac, &dz);
                x = nx;
                jac = nj;
            } else {
                x = heun_step(fields, &x, &dz);
            }
            finite_or_fail(&x, t)?;
        }
        times.push(t);
        pre.push(x.clone());
        if record {
            jac_pre.push(jac.clone());
        }
        match z.jump_at_index(k) {
            Some(jump) => {
                let mapped = |e: Error| match e {
                    Error::IntegrationFailure { .. } => Error::IntegrationFailure { time: t },
                    other => other,
                };
                if record {
                    let (nx, dphi) = odeflow::flow_with_jacobian(fields, jump, &x, 1.0, &cfg.ode).map_err(mapped)?;
                    x = nx;
                    jac = dphi * jac;
                } else {
                    x = odeflow::flow(fields, jump, &x, 1.0, &cfg.ode).map_err(mapped)?;
                }
                is_jump.push(true);
            }
            None => is_jump.push(false),
        }
        post.push(x.clone());
        if record {
            jac_post.push(jac.clone());
        }
    }

    Ok(Trajectory {
        times,
        pre,
        post,
        is_jump,
        jac_pre: record.then_some(jac_pre),
        jac_post: record.then_some(jac_post),
    })
}

/// Solves over the whole path; Jacobians are recorded iff
/// `cfg.record_jacobian`.
pub fn solve_point(
    fields: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<Trajectory> {
    solve_prefix(fields, z, x0, cfg, z.len() - 1)
}

/// [`solve_point`] with Jacobians always recorded.
pub fn solve_with_jacobian(
    fields: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<Trajectory> {
    let cfg = MarcusConfig { record_jacobian: true, ..cfg.clone() };
    solve_point(fields, z, x0, &cfg)
}

/// Jacobian-recording solve on a prefix.
pub fn solve_prefix_with_jacobian(
    fields: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
    end: usize,
) -> Result<Trajectory> {
    let cfg = MarcusConfig { record_jacobian: true, ..cfg.clone() };
    solve_prefix(fields, z, x0, &cfg, end)
}
