//! Deterministic flows `φ(Σ w_i X^i, x0, u)` and their Jacobians.
//!
//! Integration is fixed-step classical RK4 with `ceil(|u| * substeps)` steps.
//! When every field with a nonzero weight is linear and the fast path is
//! enabled, the flow is `expm(u Σ w_i A_i) x0` instead.

mod expm;
mod fields;

pub use expm::expm;
pub use fields::{central_difference_jacobian, FieldFn, FnFields, JacobianFn, LinearFields, VectorFieldSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    #[default]
    ClassicalRk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    /// RK4 steps per unit of flow time.
    pub substeps: usize,
    pub method: OdeMethod,
    pub linear_fast_path: bool,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { substeps: 256, method: OdeMethod::ClassicalRk4, linear_fast_path: true }
    }
}

impl OdeConfig {
    pub fn with_substeps(substeps: usize) -> Self {
        Self { substeps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be at least 1".into()));
        }
        Ok(())
    }

    fn steps_for(&self, u: f64) -> usize {
        ((u.abs() * self.substeps as f64).ceil() as usize).max(1)
    }
}

/// A system `dx = Σ_i F^i(x) w_i` given only through its weighted drive.
/// Used for state spaces (matrix pairs, mesh states) that are not naturally
/// a [`VectorFieldSet`].
pub trait DrivenSystem: Send + Sync {
    fn dim(&self) -> usize;

    /// `Σ_i w_i F^i(x)`.
    fn drive(&self, x: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Adapter presenting a [`VectorFieldSet`] as a [`DrivenSystem`].
pub struct FieldsDrive<'a>(pub &'a dyn VectorFieldSet);

impl DrivenSystem for FieldsDrive<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn drive(&self, x: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0.combine(weights, x))
    }
}

fn check_finite(x: &DVector<f64>, time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { time })
    }
}

fn check_inputs(fields: &dyn VectorFieldSet, weights: &DVector<f64>, x0: &DVector<f64>) -> Result<()> {
    if weights.len() != fields.count() {
        return Err(Error::DimensionMismatch { expected: fields.count(), got: weights.len() });
    }
    if x0.len() != fields.dim() {
        return Err(Error::DimensionMismatch { expected: fields.dim(), got: x0.len() });
    }
    Ok(())
}

fn rk4_step(
    sys: &dyn DrivenSystem,
    weights: &DVector<f64>,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let k1 = sys.drive(x, weights)?;
    let k2 = sys.drive(&(x + &k1 * (0.5 * dt)), weights)?;
    let k3 = sys.drive(&(x + &k2 * (0.5 * dt)), weights)?;
    let k4 = sys.drive(&(x + &k3 * dt), weights)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// RK4 flow of a driven system for flow time `u`.
pub fn flow_driven(
    sys: &dyn DrivenSystem,
    weights: &DVector<f64>,
    x0: &DVector<f64>,
    u: f64,
    cfg: &OdeConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    if u == 0.0 || weights.iter().all(|w| *w == 0.0) {
        return Ok(x0.clone());
    }
    let steps = cfg.steps_for(u);
    let dt = u / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        x = rk4_step(sys, weights, &x, dt)?;
        check_finite(&x, (k + 1) as f64 * dt)?;
    }
    Ok(x)
}

/// `φ(Σ w_i X^i, x0, u)`.
pub fn flow(
    fields: &dyn VectorFieldSet,
    weights: &DVector<f64>,
    x0: &DVector<f64>,
    u: f64,
    cfg: &OdeConfig,
) -> Result<DVector<f64>> {
    check_inputs(fields, weights, x0)?;
    if cfg.linear_fast_path {
        if let Some(a) = fields.combined_linear(weights) {
            let x = expm(&(a * u)) * x0;
            check_finite(&x, u)?;
            return Ok(x);
        }
    }
    flow_driven(&FieldsDrive(fields), weights, x0, u, cfg)
}

/// Flow together with its spatial Jacobian, integrating `J' = (Σ w_i X'^i) J`
/// alongside the state.
pub fn flow_with_jacobian(
    fields: &dyn VectorFieldSet,
    weights: &DVector<f64>,
    x0: &DVector<f64>,
    u: f64,
    cfg: &OdeConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(fields, weights, x0)?;
    cfg.validate()?;
    let n = fields.dim();
    if u == 0.0 || weights.iter().all(|w| *w == 0.0) {
        return Ok((x0.clone(), DMatrix::identity(n, n)));
    }
    if cfg.linear_fast_path {
        if let Some(a) = fields.combined_linear(weights) {
            let e = expm(&(a * u));
            let x = &e * x0;
            check_finite(&x, u)?;
            return Ok((x, e));
        }
    }
    let steps = cfg.steps_for(u);
    let dt = u / steps as f64;
    let deriv = |x: &DVector<f64>, j: &DMatrix<f64>| {
        (fields.combine(weights, x), fields.combine_jacobian(weights, x) * j)
    };
    let mut x = x0.clone();
    let mut j = DMatrix::identity(n, n);
    for k in 0..steps {
        let (k1x, k1j) = deriv(&x, &j);
        let (k2x, k2j) = deriv(&(&x + &k1x * (0.5 * dt)), &(&j + &k1j * (0.5 * dt)));
        let (k3x, k3j) = deriv(&(&x + &k2x * (0.5 * dt)), &(&j + &k2j * (0.5 * dt)));
        let (k4x, k4j) = deriv(&(&x + &k3x * dt), &(&j + &k3j * dt));
        x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
        j += (k1j + k2j * 2.0 + k3j * 2.0 + k4j) * (dt / 6.0);
        let t = (k + 1) as f64 * dt;
        check_finite(&x, t)?;
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure { time: t });
        }
    }
    Ok((x, j))
}

/// States `φ(X·w, x0, k/N)` for `k = 0..=N`.
pub fn flow_nodes(
    fields: &dyn VectorFieldSet,
    weights: &DVector<f64>,
    x0: &DVector<f64>,
    intervals: usize,
    cfg: &OdeConfig,
) -> Result<Vec<DVector<f64>>> {
    check_inputs(fields, weights, x0)?;
    let dt = 1.0 / intervals as f64;
    let mut nodes = Vec::with_capacity(intervals + 1);
    nodes.push(x0.clone());
    if weights.iter().all(|w| *w == 0.0) {
        nodes.resize(intervals + 1, x0.clone());
        return Ok(nodes);
    }
    let linear = if cfg.linear_fast_path { fields.combined_linear(weights) } else { None };
    if let Some(a) = linear {
        let e = expm(&(a * dt));
        for k in 0..intervals {
            let x = &e * &nodes[k];
            check_finite(&x, (k + 1) as f64 * dt)?;
            nodes.push(x);
        }
        return Ok(nodes);
    }
    // Each node interval gets at least one RK4 step; more when the configured
    // substep count exceeds the node count.
    let inner = cfg.substeps.div_ceil(intervals).max(1);
    let h = dt / inner as f64;
    let sys = FieldsDrive(fields);
    for k in 0..intervals {
        let mut x = nodes[k].clone();
        for _ in 0..inner {
            x = rk4_step(&sys, weights, &x, h)?;
        }
        check_finite(&x, (k + 1) as f64 * dt)?;
        nodes.push(x);
    }
    Ok(nodes)
}

/// `∫_0^1 H(φ(X·w, x0, u)) du` by composite Simpson quadrature on an even
/// number of panels at least `max(substeps, quad_nodes - 1)`.
pub fn curve_average(
    h: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    fields: &dyn VectorFieldSet,
    weights: &DVector<f64>,
    x0: &DVector<f64>,
    cfg: &OdeConfig,
    quad_nodes: usize,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if quad_nodes < 2 {
        return Err(Error::InvalidParameter("curve_average needs at least two nodes".into()));
    }
    if weights.iter().all(|w| *w == 0.0) {
        check_inputs(fields, weights, x0)?;
        return Ok(h(x0));
    }
    let mut panels = cfg.substeps.max(quad_nodes - 1).max(2);
    if panels % 2 == 1 {
        panels += 1;
    }
    let nodes = flow_nodes(fields, weights, x0, panels, cfg)?;
    let mut acc = h(&nodes[0]) + h(&nodes[panels]);
    for (k, x) in nodes.iter().enumerate().take(panels).skip(1) {
        acc += h(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    Ok(acc / (3.0 * panels as f64))
}
