//! Generalized Stratonovich integrals along Marcus solutions, and residual
//! checks of the change-of-variables formula for a composition of two flows.
//!
//! Every integral is split into three accumulators:
//! * `ito`: left-point sums, using left limits at jump times;
//! * `qv`: the half-trace correction against `[Z, Z]^c`, taken per grid
//!   interval as the average of the correction evaluated at both ends;
//! * `jump`: the fictitious-curve term at each jump.
//!
//! For the composition `w_t = ψ_t(ξ_t(x0))`, where `ψ` is the flow of `X`
//! and `ξ` the flow of `Y`, the pushforward `Dψ_s(ξ_s) Y(ξ_s)` is obtained by
//! re-solving the `ψ` variational equation from each needed base point.
//! Second derivatives of `ψ` enter the correction term and are taken by
//! central differences of those Jacobian solves.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marcus::{self, MarcusConfig, Trajectory};
use crate::odeflow::{self, VectorFieldSet};
use crate::semimartingale::JumpPath;

/// Matrix-valued integrand `H: R^n -> R^{d×m}`.
pub trait Integrand: Send + Sync {
    fn rows(&self) -> usize;

    fn eval(&self, g: &DVector<f64>) -> DMatrix<f64>;

    /// Derivative of column `col` of `H` at `g` in direction `dir`.
    fn directional(&self, g: &DVector<f64>, col: usize, dir: &DVector<f64>) -> DVector<f64> {
        let scale = dir.amax();
        if scale == 0.0 {
            return DVector::zeros(self.rows());
        }
        let eps = 1e-5 * g.amax().max(1.0) / scale;
        let plus = self.eval(&(g + dir * eps));
        let minus = self.eval(&(g - dir * eps));
        (plus.column(col) - minus.column(col)) / (2.0 * eps)
    }
}

/// `H(g) = C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantIntegrand(pub DMatrix<f64>);

impl Integrand for ConstantIntegrand {
    fn rows(&self) -> usize {
        self.0.nrows()
    }

    fn eval(&self, _g: &DVector<f64>) -> DMatrix<f64> {
        self.0.clone()
    }

    fn directional(&self, _g: &DVector<f64>, _col: usize, _dir: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.0.nrows())
    }
}

/// `H(g) = [X^1(g) .. X^m(g)]` with analytic directional derivatives.
#[derive(Clone)]
pub struct FieldIntegrand(pub Arc<dyn VectorFieldSet>);

impl Integrand for FieldIntegrand {
    fn rows(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, g: &DVector<f64>) -> DMatrix<f64> {
        self.0.matrix(g)
    }

    fn directional(&self, g: &DVector<f64>, col: usize, dir: &DVector<f64>) -> DVector<f64> {
        self.0.jacobian(col, g) * dir
    }
}

/// Integrand from a closure; derivatives by central differences.
#[derive(Clone)]
pub struct FnIntegrand {
    rows: usize,
    f: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

impl FnIntegrand {
    pub fn new(rows: usize, f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self { rows, f: Arc::new(f) }
    }
}

impl Integrand for FnIntegrand {
    fn rows(&self) -> usize {
        self.rows
    }

    fn eval(&self, g: &DVector<f64>) -> DMatrix<f64> {
        (self.f)(g)
    }
}

/// An integral with its three accumulators. `partial[k]` is the value on
/// `[0, t_k]` (including a jump at `t_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralReport {
    pub times: Vec<f64>,
    pub partial: Vec<DVector<f64>>,
    pub ito: DVector<f64>,
    pub qv: DVector<f64>,
    pub jump: DVector<f64>,
    pub value: DVector<f64>,
}

struct Accumulator {
    times: Vec<f64>,
    partial: Vec<DVector<f64>>,
    ito: DVector<f64>,
    qv: DVector<f64>,
    jump: DVector<f64>,
}

impl Accumulator {
    fn new(d: usize, t0: f64) -> Self {
        Self {
            times: vec![t0],
            partial: vec![DVector::zeros(d)],
            ito: DVector::zeros(d),
            qv: DVector::zeros(d),
            jump: DVector::zeros(d),
        }
    }

    fn mark(&mut self, t: f64) {
        self.times.push(t);
        self.partial.push(&self.ito + &self.qv + &self.jump);
    }

    fn finish(self) -> IntegralReport {
        let value = &self.ito + &self.qv + &self.jump;
        IntegralReport { times: self.times, partial: self.partial, ito: self.ito, qv: self.qv, jump: self.jump, value }
    }
}

/// Number of Simpson nodes used for fictitious-curve averages.
const CURVE_NODES: usize = 65;

/// `∫ H(G_s) ◇ dZ_s` where `G` solves `dG = Y(G) ◇ dZ`, `G_0 = g0`.
pub fn marcus_integral(
    h: &dyn Integrand,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    g0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<IntegralReport> {
    let g = marcus::solve_point(y, z, g0, cfg)?;
    marcus_integral_along(h, y, z, &g, cfg)
}

/// [`marcus_integral`] along an already solved `G`.
pub fn marcus_integral_along(
    h: &dyn Integrand,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    g: &Trajectory,
    cfg: &MarcusConfig,
) -> Result<IntegralReport> {
    let probe = h.eval(g.post(0));
    if probe.ncols() != z.dim() {
        return Err(Error::DimensionMismatch { expected: z.dim(), got: probe.ncols() });
    }
    let m = z.dim();
    let correction = |x: &DVector<f64>, q: &DMatrix<f64>| {
        let yx = y.matrix(x) * q;
        let mut out = DVector::zeros(h.rows());
        for i in 0..m {
            out += h.directional(x, i, &yx.column(i).into_owned());
        }
        out
    };
    let mut acc = Accumulator::new(h.rows(), z.times()[0]);
    for k in 1..z.len() {
        let dzc = z.continuous_increment(k);
        if dzc.iter().any(|v| *v != 0.0) {
            let a = g.post(k - 1);
            let b = g.pre(k);
            acc.ito += h.eval(a) * &dzc;
            let q = &dzc * dzc.transpose();
            acc.qv += (correction(a, &q) + correction(b, &q)) * 0.25;
        }
        if let Some(dz) = z.jump_at_index(k) {
            let pre = g.pre(k);
            let h_pre = h.eval(pre);
            acc.ito += &h_pre * dz;
            let avg = odeflow::curve_average(&|x| h.eval(x), y, dz, pre, &cfg.ode, CURVE_NODES)?;
            acc.jump += (avg - h_pre) * dz;
        }
        acc.mark(z.times()[k]);
    }
    Ok(acc.finish())
}

/// Derivative data of `ψ` at one base point `b = ξ_s`.
#[derive(Debug, Clone)]
struct OrbitSample {
    xi: DVector<f64>,
    /// `ψ_s(b)`.
    w: DVector<f64>,
    /// `Dψ_s(b)`.
    jac: DMatrix<f64>,
    /// `Dψ_s(b) Y(b)`, one column per channel.
    push: DMatrix<f64>,
    /// `second[i][j] = D²ψ_s(b)[Y^j(b), Y^i(b)]`; empty when every `X^i` is
    /// linear.
    second: Vec<Vec<DVector<f64>>>,
}

/// `ξ` along the orbit of `x0`, and `ψ` data at `ξ_{t_k}` (post) and at
/// `ξ_{t_k -}` (pre) for every grid index.
struct CompositeOrbit {
    xi: Trajectory,
    pre: Vec<OrbitSample>,
    post: Vec<OrbitSample>,
}

fn all_linear(fields: &dyn VectorFieldSet) -> bool {
    (0..fields.count()).all(|i| fields.linear_matrix(i).is_some())
}

fn orbit_sample(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    base: &DVector<f64>,
    end: usize,
    use_pre: bool,
    cfg: &MarcusConfig,
) -> Result<OrbitSample> {
    let read = |traj: &Trajectory| -> Result<(DVector<f64>, DMatrix<f64>)> {
        if use_pre {
            Ok((traj.pre(end).clone(), traj.jacobian_pre(end)?.clone()))
        } else {
            Ok((traj.post(end).clone(), traj.jacobian_post(end)?.clone()))
        }
    };
    let traj = marcus::solve_prefix_with_jacobian(x, z, base, cfg, end)?;
    let (w, jac) = read(&traj)?;
    let ymat = y.matrix(base);
    let push = &jac * &ymat;
    let m = y.count();
    let mut second = Vec::new();
    if !all_linear(x) {
        let mut dj = Vec::with_capacity(m);
        for j in 0..m {
            let yj = ymat.column(j).into_owned();
            let len = yj.norm();
            if len == 0.0 {
                dj.push(DMatrix::zeros(x.dim(), x.dim()));
                continue;
            }
            let eps = 1e-5 * base.norm().max(1.0) / len;
            let plus = marcus::solve_prefix_with_jacobian(x, z, &(base + &yj * eps), cfg, end)?;
            let minus = marcus::solve_prefix_with_jacobian(x, z, &(base - &yj * eps), cfg, end)?;
            dj.push((read(&plus)?.1 - read(&minus)?.1) / (2.0 * eps));
        }
        second = (0..m)
            .map(|i| {
                let yi = ymat.column(i).into_owned();
                dj.iter().map(|d| d * &yi).collect()
            })
            .collect();
    }
    Ok(OrbitSample { xi: base.clone(), w, jac, push, second })
}

fn composite_orbit(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<CompositeOrbit> {
    if x.dim() != y.dim() || x.count() != y.count() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    let xi = marcus::solve_point(y, z, x0, cfg)?;
    let pairs: Vec<Result<(OrbitSample, OrbitSample)>> = (0..z.len())
        .into_par_iter()
        .map(|k| {
            let post = orbit_sample(x, y, z, xi.post(k), k, false, cfg)?;
            let pre = if xi.is_jump(k) {
                orbit_sample(x, y, z, xi.pre(k), k, true, cfg)?
            } else {
                post.clone()
            };
            Ok((pre, post))
        })
        .collect();
    let mut pre = Vec::with_capacity(z.len());
    let mut post = Vec::with_capacity(z.len());
    for pair in pairs {
        let (a, b) = pair?;
        pre.push(a);
        post.push(b);
    }
    Ok(CompositeOrbit { xi, pre, post })
}

/// `½ Σ_ij Q_ij [X'^j(w) K^i + D²ψ[Y^j, Y^i] + Dψ Y'^i(ξ) Y^j(ξ)]`.
fn pushforward_correction(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    s: &OrbitSample,
    q: &DMatrix<f64>,
) -> DVector<f64> {
    let m = y.count();
    let n = x.dim();
    let ymat = y.matrix(&s.xi);
    let mut out = DVector::zeros(n);
    for i in 0..m {
        let dyi = y.jacobian(i, &s.xi);
        for j in 0..m {
            let qij = q[(i, j)];
            if qij == 0.0 {
                continue;
            }
            let mut term = x.jacobian(j, &s.w) * s.push.column(i) + &s.jac * (&dyi * ymat.column(j));
            if !s.second.is_empty() {
                term += &s.second[i][j];
            }
            out.axpy(qij, &term, 1.0);
        }
    }
    out * 0.5
}

fn integrals_on_orbit(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    orbit: &CompositeOrbit,
    cfg: &MarcusConfig,
) -> Result<(IntegralReport, IntegralReport)> {
    let n = x.dim();
    let t0 = z.times()[0];
    let mut along = Accumulator::new(n, t0);
    let mut push = Accumulator::new(n, t0);
    for k in 1..z.len() {
        let dzc = z.continuous_increment(k);
        if dzc.iter().any(|v| *v != 0.0) {
            let a = &orbit.post[k - 1];
            let b = &orbit.pre[k];
            let xa = x.matrix(&a.w) * &dzc;
            along.ito += &xa;
            let predictor = &a.w + &xa + &a.push * &dzc;
            along.qv += (x.combine(&dzc, &predictor) - &xa) * 0.5;

            push.ito += &a.push * &dzc;
            let q = &dzc * dzc.transpose();
            push.qv += (pushforward_correction(x, y, a, &q) + pushforward_correction(x, y, b, &q)) * 0.5;
        }
        if let Some(dz) = z.jump_at_index(k) {
            let before = &orbit.pre[k];
            let w_minus = &before.w;
            let x_minus = x.matrix(w_minus) * dz;
            let jumped_w = odeflow::flow(x, dz, w_minus, 1.0, &cfg.ode)?;
            along.ito += &x_minus;
            along.jump += &jumped_w - w_minus - &x_minus;

            let k_minus = &before.push * dz;
            let xi_after = odeflow::flow(y, dz, orbit.xi.pre(k), 1.0, &cfg.ode)?;
            let psi_minus = marcus::solve_prefix(x, z, &xi_after, cfg, k)?;
            let concatenated = odeflow::flow(x, dz, psi_minus.pre(k), 1.0, &cfg.ode)?;
            push.ito += &k_minus;
            push.jump += concatenated - jumped_w - k_minus;
        }
        along.mark(z.times()[k]);
        push.mark(z.times()[k]);
    }
    Ok((along.finish(), push.finish()))
}

/// `∫ Dψ_s(ξ_s) Y(ξ_s) ◇ dZ_s` along the orbit of `x0`, where `ψ` is the flow
/// of `x` and `ξ` the flow of `y`.
pub fn pushforward_integral(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<IntegralReport> {
    let orbit = composite_orbit(x, y, z, x0, cfg)?;
    Ok(integrals_on_orbit(x, y, z, &orbit, cfg)?.1)
}

/// `∫ X(ψ_s(ξ_s)) ◇ dZ_s` along the orbit of `x0`.
pub fn composite_integral(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<IntegralReport> {
    let orbit = composite_orbit(x, y, z, x0, cfg)?;
    Ok(integrals_on_orbit(x, y, z, &orbit, cfg)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvkConfig {
    pub marcus: MarcusConfig,
    /// Coarsest grid step; rung `r` uses `base_step / 2^r`.
    pub base_step: f64,
    pub rungs: usize,
    /// Largest accepted `residual(h/2) / residual(h)`.
    pub max_ratio: f64,
    /// Pairs where both residuals are below this are not ratio-checked.
    pub residual_floor: f64,
}

impl Default for IvkConfig {
    fn default() -> Self {
        Self { marcus: MarcusConfig::default(), base_step: 0.01, rungs: 3, max_ratio: 0.6, residual_floor: 1e-10 }
    }
}

/// One refinement rung of an identity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub h: f64,
    pub residual_sup: f64,
    /// Sum of the Itô accumulators of both integrals at the horizon.
    pub ito: Vec<f64>,
    pub qv: Vec<f64>,
    pub jump: Vec<f64>,
    /// Largest `|Δ LHS - Δ RHS|` over jump times, if any.
    pub jump_concatenation: Option<f64>,
    /// Largest per-interval increment residual.
    pub interval_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rungs: Vec<RungReport>,
    /// `residual(h/2) / residual(h)` for consecutive rungs.
    pub ratios: Vec<f64>,
    /// False when some ratio exceeds the configured bound.
    pub decay_ok: bool,
    pub max_ratio: f64,
}

fn check_ladder(cfg: &IvkConfig) -> Result<()> {
    if cfg.rungs < 2 {
        return Err(Error::InvalidParameter("a ladder needs at least two rungs".into()));
    }
    if !(cfg.base_step.is_finite() && cfg.base_step > 0.0) {
        return Err(Error::InvalidParameter("base_step must be positive".into()));
    }
    Ok(())
}

/// Checks `ψ_t(ξ_t(x0)) = x0 + ∫ X(ψ_s(ξ_s)) ◇ dZ + ∫ Dψ_s Y(ξ_s) ◇ dZ` on a
/// single grid.
pub fn ivk_rung(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &MarcusConfig,
) -> Result<RungReport> {
    let orbit = composite_orbit(x, y, z, x0, cfg)?;
    let (along, push) = integrals_on_orbit(x, y, z, &orbit, cfg)?;
    let rhs = |k: usize| x0 + &along.partial[k] + &push.partial[k];
    let mut residual_sup = 0.0f64;
    let mut interval_residual = 0.0f64;
    let mut concatenation: Option<f64> = None;
    for k in 0..z.len() {
        residual_sup = residual_sup.max((&orbit.post[k].w - rhs(k)).amax());
        if k == 0 {
            continue;
        }
        let d_rhs = rhs(k) - rhs(k - 1);
        let d_lhs = &orbit.post[k].w - &orbit.post[k - 1].w;
        interval_residual = interval_residual.max((d_lhs - d_rhs).amax());
        if z.is_jump(k) {
            // Jump part alone: the RHS just before the jump is the sum up to
            // k-1 plus the continuous increment, which the pre sample tracks.
            let lhs_jump = &orbit.post[k].w - &orbit.pre[k].w;
            let along_jump = odeflow::flow(x, z.jump_at_index(k).unwrap(), &orbit.pre[k].w, 1.0, &cfg.ode)?
                - &orbit.pre[k].w;
            let xi_after = odeflow::flow(y, z.jump_at_index(k).unwrap(), orbit.xi.pre(k), 1.0, &cfg.ode)?;
            let psi_minus = marcus::solve_prefix(x, z, &xi_after, cfg, k)?;
            let concatenated = odeflow::flow(x, z.jump_at_index(k).unwrap(), psi_minus.pre(k), 1.0, &cfg.ode)?;
            let push_jump = concatenated - odeflow::flow(x, z.jump_at_index(k).unwrap(), &orbit.pre[k].w, 1.0, &cfg.ode)?;
            let r = (lhs_jump - along_jump - push_jump).amax();
            concatenation = Some(concatenation.map_or(r, |c| c.max(r)));
        }
    }
    let h = z.times().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    Ok(RungReport {
        h,
        residual_sup,
        ito: (&along.ito + &push.ito).iter().copied().collect(),
        qv: (&along.qv + &push.qv).iter().copied().collect(),
        jump: (&along.jump + &push.jump).iter().copied().collect(),
        jump_concatenation: concatenation,
        interval_residual,
    })
}

fn ladder(
    cfg: &IvkConfig,
    z: &JumpPath,
    rung: impl Fn(&JumpPath) -> Result<RungReport> + Sync,
) -> Result<LadderReport> {
    check_ladder(cfg)?;
    let rungs: Vec<RungReport> = (0..cfg.rungs)
        .into_par_iter()
        .map(|r| {
            let path = z.regrid(cfg.base_step / 2f64.powi(r as i32))?;
            rung(&path)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = Vec::new();
    let mut decay_ok = true;
    for pair in rungs.windows(2) {
        let ratio = if pair[0].residual_sup == 0.0 { 0.0 } else { pair[1].residual_sup / pair[0].residual_sup };
        ratios.push(ratio);
        let floored = pair[0].residual_sup < cfg.residual_floor && pair[1].residual_sup < cfg.residual_floor;
        if !floored && ratio > cfg.max_ratio {
            decay_ok = false;
        }
    }
    Ok(LadderReport { rungs, ratios, decay_ok, max_ratio: cfg.max_ratio })
}

/// Runs [`ivk_rung`] on `z` resampled at `base_step / 2^r`, rungs in
/// parallel.
pub fn verify_ivk(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &IvkConfig,
) -> Result<LadderReport> {
    ladder(cfg, z, |path| ivk_rung(x, y, path, x0, &cfg.marcus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeibnizRung {
    pub h: f64,
    pub max_interval_residual: f64,
    /// `max_interval_residual / h`.
    pub scaled: f64,
}

/// Per-interval form: `Δ(ψ∘ξ)` against the sum of the two integral
/// increments on each grid interval.
pub fn verify_leibniz(
    x: &dyn VectorFieldSet,
    y: &dyn VectorFieldSet,
    z: &JumpPath,
    x0: &DVector<f64>,
    cfg: &IvkConfig,
) -> Result<Vec<LeibnizRung>> {
    let report = verify_ivk(x, y, z, x0, cfg)?;
    Ok(report
        .rungs
        .iter()
        .map(|r| LeibnizRung { h: r.h, max_interval_residual: r.interval_residual, scaled: r.interval_residual / r.h })
        .collect())
}

/// Independent Stratonovich midpoint sums `Σ H(½(G_{k-1} + G_k)) ΔZ_k` for a
/// path without jumps; used to cross-check [`marcus_integral`].
pub fn midpoint_sum(h: &dyn Integrand, g: &Trajectory, z: &JumpPath) -> Result<DVector<f64>> {
    if !z.jumps().is_empty() {
        return Err(Error::InvalidPath("midpoint sums need a continuous path".into()));
    }
    let mut out = DVector::zeros(h.rows());
    for k in 1..z.len() {
        let mid = (g.post(k - 1) + g.post(k)) * 0.5;
        out += h.eval(&mid) * z.continuous_increment(k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::{FnFields, LinearFields};
    use crate::semimartingale::deterministic_path;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn unit_field() -> FnFields {
        FnFields::new(1).with_field(|_| v(&[1.0]), |_| DMatrix::zeros(1, 1))
    }

    #[test]
    fn constant_integrand() {
        let z = deterministic_path(&[0.0, 0.5, 1.0], &[v(&[0.1, 0.0]), v(&[0.7, -1.0]), v(&[0.2, 0.4])], &[(0.3, v(&[1.0, 2.0]))])
            .unwrap()
            .regrid(0.01)
            .unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let y = FnFields::new(2)
            .with_fd_field(|x| v(&[x[1], -x[0]]))
            .with_fd_field(|x| v(&[x[0] * x[1], 1.0]));
        let r = marcus_integral(&ConstantIntegrand(c.clone()), &y, &z, &v(&[0.3, 0.2]), &MarcusConfig::default()).unwrap();
        let total = z.value_at_index(z.len() - 1) - z.value_at_index(0);
        assert!((&r.value - &c * total).amax() < 1e-12);
        assert!(r.qv.amax() == 0.0);
        assert!(r.jump.amax() < 1e-13);
        assert_eq!(r.value, &r.ito + &r.qv + &r.jump);
    }

    #[test]
    fn scalar_identity_integrand_with_one_jump() {
        // H(g) = g, Y = 1, Z_t = t + Δ 1{t >= t0}, G_0 = 0: G_t = Z_t, and the
        // Stratonovich integral of G against itself is G_T^2 / 2.
        let (t0, delta, horizon) = (0.4, 0.7, 1.0);
        let z = deterministic_path(&[0.0, horizon], &[v(&[0.0]), v(&[horizon])], &[(t0, v(&[delta]))])
            .unwrap()
            .regrid(0.05)
            .unwrap();
        let h = FnIntegrand::new(1, |g| DMatrix::from_element(1, 1, g[0]));
        let r = marcus_integral(&h, &unit_field(), &z, &v(&[0.0]), &MarcusConfig::default()).unwrap();
        let want = (horizon + delta).powi(2) / 2.0;
        assert!((r.value[0] - want).abs() < 1e-9, "{} vs {want}", r.value[0]);
        assert!((r.jump[0] - delta * delta / 2.0).abs() < 1e-9);
    }

    #[test]
    fn agrees_with_midpoint_sums_on_continuous_paths() {
        let y = FnFields::new(2).with_field(
            |x| v(&[-x[1], x[0] + 0.3 * x[0] * x[0]]),
            |x| DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0 + 0.6 * x[0], 0.0]),
        );
        let h = FnIntegrand::new(2, |g| DMatrix::from_column_slice(2, 1, &[g[0].cos(), g[0] * g[1]]));
        let fine: Vec<f64> = (0..=2000).map(|k| k as f64 / 2000.0).collect();
        let values: Vec<_> = fine.iter().map(|t| v(&[(4.0 * t).sin()])).collect();
        let base = deterministic_path(&fine, &values, &[]).unwrap();
        let mut errs = Vec::new();
        for step in [0.02, 0.01, 0.005] {
            let z = base.regrid(step).unwrap();
            let cfg = MarcusConfig::default();
            let g = marcus::solve_point(&y, &z, &v(&[1.0, 0.0]), &cfg).unwrap();
            let r = marcus_integral_along(&h, &y, &z, &g, &cfg).unwrap();
            errs.push((r.value - midpoint_sum(&h, &g, &z).unwrap()).amax());
        }
        assert!(errs[2] < errs[1] && errs[1] < errs[0], "{errs:?}");
        assert!(errs[2] < 1e-4);
    }

    #[test]
    fn pushforward_collapses_to_marcus_integral_when_x_is_zero() {
        let y: Arc<dyn VectorFieldSet> = Arc::new(FnFields::new(2).with_field(
            |x| v(&[-x[1] * (1.0 + 0.2 * x[0]), x[0]]),
            |x| DMatrix::from_row_slice(2, 2, &[-0.2 * x[1], -(1.0 + 0.2 * x[0]), 1.0, 0.0]),
        ));
        let fine: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let values: Vec<_> = fine.iter().map(|t| v(&[(3.0 * t).sin()])).collect();
        let z = deterministic_path(&fine, &values, &[(0.55, v(&[0.9]))]).unwrap();
        let x0 = v(&[0.8, 0.3]);
        let cfg = MarcusConfig::default();
        let p = pushforward_integral(&LinearFields::zero(2, 1), &*y, &z, &x0, &cfg).unwrap();
        let m = marcus_integral(&FieldIntegrand(y.clone()), &*y, &z, &x0, &cfg).unwrap();
        assert!((&p.ito - &m.ito).amax() < 1e-12);
        assert!((&p.qv - &m.qv).amax() < 1e-12);
        assert!((&p.jump - &m.jump).amax() < 1e-8);
        assert!((&p.value - &m.value).amax() < 1e-8);
    }

    #[test]
    fn zero_fields_give_zero() {
        let z = deterministic_path(&[0.0, 1.0], &[v(&[0.0]), v(&[2.0])], &[(0.5, v(&[1.0]))]).unwrap().regrid(0.1).unwrap();
        let zero = LinearFields::zero(2, 1);
        let cfg = MarcusConfig::default();
        let p = pushforward_integral(&zero, &zero, &z, &v(&[1.0, 1.0]), &cfg).unwrap();
        assert_eq!(p.value, DVector::zeros(2));
    }

    #[test]
    fn continuous_path_has_zero_jump_term() {
        let z = deterministic_path(&[0.0, 1.0], &[v(&[0.0]), v(&[1.0])], &[]).unwrap().regrid(0.05).unwrap();
        let x = FnFields::new(2).with_fd_field(|p| v(&[p[1], -p[0] * p[0]]));
        let y = FnFields::new(2).with_fd_field(|p| v(&[0.3 * p[0], p[0] - p[1]]));
        let p = pushforward_integral(&x, &y, &z, &v(&[0.5, 0.5]), &MarcusConfig::default()).unwrap();
        assert!(p.jump.iter().all(|j| *j == 0.0));
    }

    #[test]
    fn y_zero_reduces_to_psi_equation() {
        let z = deterministic_path(&[0.0, 0.5, 1.0], &[v(&[0.0]), v(&[0.8]), v(&[0.1])], &[(0.7, v(&[0.6]))])
            .unwrap()
            .regrid(0.01)
            .unwrap();
        let x = FnFields::new(2).with_fd_field(|p| v(&[-p[1], p[0] * (1.0 + 0.3 * p[1])]));
        let r = ivk_rung(&x, &LinearFields::zero(2, 1), &z, &v(&[1.0, 0.2]), &MarcusConfig::default()).unwrap();
        assert!(r.residual_sup < 1e-12, "{}", r.residual_sup);
    }
}
