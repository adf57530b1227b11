use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecomposeConfig, DecompositionRecord, Snapshot, StepDiagnostics, StopReason};
use crate::error::{Error, Result};
use crate::geometry::{split_with_bases, transversality_of_bases, ComplementaryPair, DegeneracyThresholds};
use crate::marcus::{heun_step_driven, solve_point, Trajectory};
use crate::odeflow::{flow_driven, DrivenSystem, VectorFieldSet};
use crate::semimartingale::JumpPath;

/// Parametrization of a planar structured mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshChart {
    /// Annulus; the angular direction is periodic.
    Polar { r_min: f64, r_max: f64, nr: usize, ntheta: usize },
    Cartesian { x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize },
}

impl Default for MeshChart {
    fn default() -> Self {
        MeshChart::Polar { r_min: 0.25, r_max: 4.0, nr: 40, ntheta: 40 }
    }
}

/// Nodes of a chart on an index grid `(i, j)`, flattened as `i * n1 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMesh {
    chart: MeshChart,
    nodes: Arc<Vec<Vector2<f64>>>,
    /// `∂(u, v)/∂y` at each node.
    node_ds: Arc<Vec<Matrix2<f64>>>,
    /// Derivative weights of the periodic axis at a node, by offset.
    periodic_diff: Arc<Vec<f64>>,
}

impl StructuredMesh {
    pub fn new(chart: MeshChart) -> Result<Self> {
        let ok = match chart {
            MeshChart::Polar { r_min, r_max, nr, ntheta } => r_min > 0.0 && r_max > r_min && nr >= 4 && ntheta >= 4,
            MeshChart::Cartesian { x_min, x_max, y_min, y_max, nx, ny } => {
                x_max > x_min && y_max > y_min && nx >= 4 && ny >= 4
            }
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid mesh {chart:?}")));
        }
        let mut mesh = Self {
            chart,
            nodes: Arc::new(Vec::new()),
            node_ds: Arc::new(Vec::new()),
            periodic_diff: Arc::new(Vec::new()),
        };
        let (n0, n1) = mesh.shape();
        let nodes: Vec<_> = (0..n0)
            .flat_map(|i| (0..n1).map(move |j| (i, j)))
            .map(|(i, j)| mesh.param_to_point(i as f64, j as f64))
            .collect();
        let node_ds = nodes.iter().map(|y| mesh.locate(y).map(|l| l.2)).collect::<Result<Vec<_>>>()?;
        mesh.nodes = Arc::new(nodes);
        mesh.node_ds = Arc::new(node_ds);
        if mesh.periodic_second() {
            mesh.periodic_diff = Arc::new(periodic_stencil(0.0, n1).iter().map(|w| w.2).collect());
        }
        Ok(mesh)
    }

    pub fn polar_annulus(r_min: f64, r_max: f64, nr: usize, ntheta: usize) -> Result<Self> {
        Self::new(MeshChart::Polar { r_min, r_max, nr, ntheta })
    }

    pub fn chart(&self) -> MeshChart {
        self.chart
    }

    pub fn shape(&self) -> (usize, usize) {
        match self.chart {
            MeshChart::Polar { nr, ntheta, .. } => (nr, ntheta),
            MeshChart::Cartesian { nx, ny, .. } => (nx, ny),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vector2<f64>] {
        &self.nodes
    }

    fn periodic_second(&self) -> bool {
        matches!(self.chart, MeshChart::Polar { .. })
    }

    fn pitch(&self) -> (f64, f64) {
        match self.chart {
            MeshChart::Polar { r_min, r_max, nr, ntheta } => ((r_max - r_min) / (nr - 1) as f64, TAU / ntheta as f64),
            MeshChart::Cartesian { x_min, x_max, y_min, y_max, nx, ny } => {
                ((x_max - x_min) / (nx - 1) as f64, (y_max - y_min) / (ny - 1) as f64)
            }
        }
    }

    fn param_to_point(&self, u: f64, v: f64) -> Vector2<f64> {
        let (du, dv) = self.pitch();
        match self.chart {
            MeshChart::Polar { r_min, .. } => {
                let (r, th) = (r_min + u * du, v * dv);
                Vector2::new(r * th.cos(), r * th.sin())
            }
            MeshChart::Cartesian { x_min, y_min, .. } => Vector2::new(x_min + u * du, y_min + v * dv),
        }
    }

    /// Fractional index coordinates of `y` and their derivative `∂(u, v)/∂y`.
    fn locate(&self, y: &Vector2<f64>) -> Result<(f64, f64, Matrix2<f64>)> {
        let (du, dv) = self.pitch();
        let (n0, n1) = self.shape();
        let (u, v, ds) = match self.chart {
            MeshChart::Polar { r_min, .. } => {
                let r2 = y.norm_squared();
                let r = r2.sqrt();
                let th = y[1].atan2(y[0]).rem_euclid(TAU);
                let ds = Matrix2::new(y[0] / (r * du), y[1] / (r * du), -y[1] / (r2 * dv), y[0] / (r2 * dv));
                ((r - r_min) / du, th / dv, ds)
            }
            MeshChart::Cartesian { x_min, y_min, .. } => {
                ((y[0] - x_min) / du, (y[1] - y_min) / dv, Matrix2::new(1.0 / du, 0.0, 0.0, 1.0 / dv))
            }
        };
        let tol = 1e-9;
        let inside_v = self.periodic_second() || (v >= -tol && v <= (n1 - 1) as f64 + tol);
        if !(u >= -tol && u <= (n0 - 1) as f64 + tol && inside_v) {
            return Err(Error::MeshResolution(format!("point ({:.6}, {:.6}) outside the mesh", y[0], y[1])));
        }
        Ok((u, v, ds))
    }
}

fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [
            0.5 * (-t + 2.0 * t2 - t3),
            0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
            0.5 * (t + 4.0 * t2 - 3.0 * t3),
            0.5 * (-t2 + t3),
        ],
        [
            0.5 * (-1.0 + 4.0 * t - 3.0 * t2),
            0.5 * (-10.0 * t + 9.0 * t2),
            0.5 * (1.0 + 8.0 * t - 9.0 * t2),
            0.5 * (-2.0 * t + 3.0 * t2),
        ],
    )
}

/// `(index, weight, d weight / d index)` for Catmull-Rom on a
/// non-periodic axis of `n` nodes.
fn cubic_stencil(u: f64, n: usize) -> [(isize, f64, f64); 4] {
    let i0 = (u.floor() as isize).clamp(0, n as isize - 2);
    let (w, dw) = catmull_rom(u - i0 as f64);
    std::array::from_fn(|a| (i0 + a as isize - 1, w[a], dw[a]))
}

/// Trigonometric interpolation weights on a periodic axis of `n` nodes.
fn periodic_stencil(v: f64, n: usize) -> Vec<(isize, f64, f64)> {
    let nf = n as f64;
    let h = TAU / nf;
    (0..n)
        .map(|j| {
            let x = ((v - j as f64) * h).rem_euclid(TAU);
            let half = 0.5 * x;
            // The closed-form derivative cancels badly close to the node.
            if x.min(TAU - x) < 0.1 {
                let (w, dw) = fourier_weight(x, n);
                return (j as isize, w, dw * h);
            }
            let (sn, cn) = (0.5 * nf * x).sin_cos();
            let (w, dw) = if n % 2 == 0 {
                let cot = half.cos() / half.sin();
                let csc2 = 1.0 / (half.sin() * half.sin());
                (sn * cot / nf, (0.5 * nf * cn * cot - 0.5 * sn * csc2) / nf)
            } else {
                let s = half.sin();
                (sn / (nf * s), (0.5 * nf * cn * s - 0.5 * sn * half.cos()) / (nf * s * s))
            };
            (j as isize, w, dw * h)
        })
        .collect()
}

/// The same weight as a cosine sum, with its derivative.
fn fourier_weight(x: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mut w = 1.0;
    let mut dw = 0.0;
    for k in 1..=(n - 1) / 2 {
        let (s, c) = (k as f64 * x).sin_cos();
        w += 2.0 * c;
        dw -= 2.0 * k as f64 * s;
    }
    if n % 2 == 0 {
        let (s, c) = (0.5 * nf * x).sin_cos();
        w += c;
        dw -= 0.5 * nf * s;
    }
    (w / nf, dw / nf)
}

/// A planar map given by its node values, interpolated as a displacement
/// from the identity so the identity map is represented exactly.
/// Non-periodic axes use Catmull-Rom cubics, whose derivative at nodes is the
/// central difference at mesh pitch; the periodic angular axis of a polar
/// mesh uses trigonometric interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshMap {
    mesh: StructuredMesh,
    values: Vec<Vector2<f64>>,
}

impl MeshMap {
    pub fn identity(mesh: &StructuredMesh) -> Self {
        Self { mesh: mesh.clone(), values: mesh.nodes().to_vec() }
    }

    pub fn from_values(mesh: &StructuredMesh, values: Vec<Vector2<f64>>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::DimensionMismatch { expected: mesh.len(), got: values.len() });
        }
        Ok(Self { mesh: mesh.clone(), values })
    }

    pub fn mesh(&self) -> &StructuredMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[Vector2<f64>] {
        &self.values
    }

    fn disp(&self, i: isize, j: isize) -> Vector2<f64> {
        let (n0, n1) = self.mesh.shape();
        let at = |i: usize, j: usize| self.values[i * n1 + j] - self.mesh.nodes[i * n1 + j];
        let along_j = |i: usize| -> Vector2<f64> {
            if self.mesh.periodic_second() {
                at(i, j.rem_euclid(n1 as isize) as usize)
            } else {
                extrapolate(j, n1, |jj| at(i, jj))
            }
        };
        extrapolate(i, n0, along_j)
    }

    /// Value and derivative with respect to the fractional index
    /// coordinates, before adding the identity.
    fn eval_param(&self, u: f64, v: f64) -> (Vector2<f64>, Matrix2<f64>) {
        let (n0, n1) = self.mesh.shape();
        let wu = cubic_stencil(u, n0);
        let wv = if self.mesh.periodic_second() { periodic_stencil(v, n1) } else { cubic_stencil(v, n1).to_vec() };
        let mut val = Vector2::zeros();
        let mut du = Vector2::zeros();
        let mut dv = Vector2::zeros();
        for &(i, a, da) in &wu {
            for &(j, b, db) in &wv {
                let d = self.disp(i, j);
                val += d * (a * b);
                du += d * (da * b);
                dv += d * (a * db);
            }
        }
        (val, Matrix2::from_columns(&[du, dv]))
    }

    fn eval2(&self, y: &Vector2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>)> {
        let (u, v, ds) = self.mesh.locate(y)?;
        let (d, g) = self.eval_param(u, v);
        Ok((y + d, Matrix2::identity() + g * ds))
    }

    /// Jacobian at node `idx`: central differences at mesh pitch along
    /// non-periodic axes, the trigonometric derivative along a periodic one.
    fn node_jacobian(&self, idx: usize) -> Matrix2<f64> {
        let (_, n1) = self.mesh.shape();
        let (i, j) = ((idx / n1) as isize, (idx % n1) as isize);
        let du = (self.disp(i + 1, j) - self.disp(i - 1, j)) * 0.5;
        let dv = if self.mesh.periodic_second() {
            self.mesh
                .periodic_diff
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .fold(Vector2::zeros(), |acc, (m, w)| acc + self.disp(i, j + m as isize) * *w)
        } else {
            (self.disp(i, j + 1) - self.disp(i, j - 1)) * 0.5
        };
        Matrix2::identity() + Matrix2::from_columns(&[du, dv]) * self.mesh.node_ds[idx]
    }

    pub fn eval(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let (w, _) = self.eval2(&to2(y)?)?;
        Ok(from2(&w))
    }

    pub fn eval_with_jacobian(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (w, j) = self.eval2(&to2(y)?)?;
        Ok((from2(&w), DMatrix::from_column_slice(2, 2, j.as_slice())))
    }

    /// Newton solve of `map(y) = target`, started from the node whose image
    /// is nearest to the target.
    pub fn inverse(&self, target: &DVector<f64>, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
        let target = to2(target)?;
        let seed = self
            .values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - target).norm_squared().total_cmp(&(b.1 - target).norm_squared()))
            .map(|(k, _)| self.mesh.nodes[k])
            .ok_or_else(|| Error::MeshResolution("empty mesh".into()))?;
        let scale = target.amax().max(1.0);
        let mut y = seed;
        let (mut w, mut j) = self.eval2(&y)?;
        for _ in 0..max_iter {
            let r = w - target;
            if r.amax() <= tol * scale {
                return Ok(from2(&y));
            }
            let step = j
                .try_inverse()
                .ok_or_else(|| Error::MeshResolution("singular mesh Jacobian".into()))?
                * r;
            // Backtrack while the trial point leaves the mesh or does not
            // reduce the residual.
            let mut lambda = 1.0;
            loop {
                let trial = y - step * lambda;
                if let Ok((tw, tj)) = self.eval2(&trial) {
                    if (tw - target).norm() < r.norm() {
                        (y, w, j) = (trial, tw, tj);
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-6 {
                    return Err(Error::MeshResolution(format!(
                        "mesh inversion stalled at ({:.6}, {:.6}), residual {:.3e}",
                        y[0],
                        y[1],
                        r.amax()
                    )));
                }
            }
        }
        Err(Error::MeshResolution(format!("mesh inversion did not converge in {max_iter} iterations")))
    }
}

/// Linear extrapolation past either end of an index range.
fn extrapolate(i: isize, n: usize, at: impl Fn(usize) -> Vector2<f64>) -> Vector2<f64> {
    let last = n as isize - 1;
    if i < 0 {
        let (a, b) = (at(0), at(1));
        a + (a - b) * (-i as f64)
    } else if i > last {
        let (a, b) = (at(n - 1), at(n - 2));
        a + (a - b) * ((i - last) as f64)
    } else {
        at(i as usize)
    }
}

fn to2(x: &DVector<f64>) -> Result<Vector2<f64>> {
    if x.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: x.len() });
    }
    Ok(Vector2::new(x[0], x[1]))
}

fn from2(x: &Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

fn mat2(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

/// Node values of `ξ` followed by the probe values of `ψ`, flattened.
/// Node drift is the `Δ^H` part of the field against `Dξ(y_j) Δ^V(y_j)`;
/// probe drift is the pulled-back vertical part, `Dξ(p)^{-1} v(ξ(p))`.
struct MeshSystem<'a> {
    fields: &'a dyn VectorFieldSet,
    pair: &'a ComplementaryPair,
    mesh: &'a StructuredMesh,
    vertical_at_nodes: Vec<DMatrix<f64>>,
    n_probes: usize,
    thr: DegeneracyThresholds,
}

impl MeshSystem<'_> {
    fn map_of(&self, s: &DVector<f64>) -> MeshMap {
        let values = (0..self.mesh.len()).map(|k| Vector2::new(s[2 * k], s[2 * k + 1])).collect();
        MeshMap { mesh: self.mesh.clone(), values }
    }

    fn probes_of(&self, s: &DVector<f64>) -> Vec<DVector<f64>> {
        let off = 2 * self.mesh.len();
        (0..self.n_probes).map(|j| DVector::from_column_slice(&s.as_slice()[off + 2 * j..off + 2 * j + 2])).collect()
    }

    fn node_frame(&self, map: &MeshMap, k: usize) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let x = from2(&map.values[k]);
        let bd = mat2(&map.node_jacobian(k)) * &self.vertical_at_nodes[k];
        let bh = self.pair.horizontal.basis(&x)?;
        Ok((x, bh, bd))
    }
}

impl DrivenSystem for MeshSystem<'_> {
    fn dim(&self) -> usize {
        2 * (self.mesh.len() + self.n_probes)
    }

    fn drive(&self, s: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let map = self.map_of(s);
        let nodes: Vec<DVector<f64>> = (0..self.mesh.len())
            .into_par_iter()
            .map(|k| {
                let (x, bh, bd) = self.node_frame(&map, k)?;
                Ok(split_with_bases(&self.fields.combine(w, &x), &bh, &bd, &self.thr)?.0)
            })
            .collect::<Result<_>>()?;
        let probes: Vec<DVector<f64>> = self
            .probes_of(s)
            .iter()
            .map(|p| {
                let (x, j) = map.eval_with_jacobian(p)?;
                let bd = &j * self.pair.vertical.basis(p)?;
                let bh = self.pair.horizontal.basis(&x)?;
                let (_, v) = split_with_bases(&self.fields.combine(w, &x), &bh, &bd, &self.thr)?;
                j.lu().solve(&v).ok_or(Error::Degenerate { det: 0.0, condition: f64::INFINITY })
            })
            .collect::<Result<_>>()?;
        Ok(DVector::from_iterator(self.dim(), nodes.iter().chain(&probes).flat_map(|v| v.iter().copied())))
    }
}

/// Maps recoverable failures to a stop reason and its message.
fn stop_of(e: Error) -> Result<(StopReason, String)> {
    match e {
        Error::Degenerate { .. } => Ok((StopReason::Degenerate, e.to_string())),
        Error::MeshResolution(_) | Error::OutsideDomain(_) => Ok((StopReason::MeshResolution, e.to_string())),
        e => Err(e),
    }
}

/// Mesh-based decomposition of a planar flow. `ξ_t` is carried as node
/// values on `mesh`, `ψ_t` at `probes` both by its own equation and as
/// `ξ_t^{-1} ∘ φ_t`; `φ_t` comes from independent Marcus solves.
pub fn decompose_pointwise(
    fields: &dyn VectorFieldSet,
    pair: &ComplementaryPair,
    z: &JumpPath,
    mesh: &StructuredMesh,
    probes: &[DVector<f64>],
    cfg: &DecomposeConfig,
) -> Result<DecompositionRecord> {
    if fields.dim() != 2 || pair.horizontal.ambient_dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: fields.dim() });
    }
    if z.dim() != fields.count() {
        return Err(Error::DimensionMismatch { expected: fields.count(), got: z.dim() });
    }
    if probes.is_empty() {
        return Err(Error::InvalidParameter("at least one probe is required".into()));
    }
    let thr = cfg.thresholds;
    let vertical_at_nodes =
        mesh.nodes().iter().map(|y| pair.vertical.basis(&from2(y))).collect::<Result<Vec<_>>>()?;
    let sys = MeshSystem { fields, pair, mesh, vertical_at_nodes, n_probes: probes.len(), thr };
    let phi: Vec<Trajectory> =
        probes.par_iter().map(|x| solve_point(fields, z, x, &cfg.marcus)).collect::<Result<_>>()?;

    let diagnostics = |k: usize, state: &DVector<f64>, is_jump: bool| -> Result<StepDiagnostics> {
        let map = sys.map_of(state);
        let margins = (0..mesh.len())
            .into_par_iter()
            .map(|j| {
                let (_, bh, bd) = sys.node_frame(&map, j)?;
                transversality_of_bases(&bh, &bd, &thr)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut residual: f64 = 0.0;
        let mut consistency: f64 = 0.0;
        for (j, p) in sys.probes_of(state).iter().enumerate() {
            let target = phi[j].post(k);
            residual = residual.max((map.eval(p)? - target).amax());
            let direct = map.inverse(target, cfg.newton_tol, cfg.newton_max_iter)?;
            consistency = consistency.max((direct - p).amax());
        }
        let det_block = margins.iter().map(|m| m.det).fold(f64::INFINITY, f64::min);
        let condition = margins.iter().map(|m| m.condition).fold(0.0, f64::max);
        if !(det_block > thr.eps_det && condition < thr.condition_cap) {
            return Err(Error::Degenerate { det: det_block, condition });
        }
        Ok(StepDiagnostics {
            t: z.times()[k],
            det_block,
            condition,
            residual_sup: residual,
            is_jump,
            psi_consistency: Some(consistency),
            renorm_deviation: 0.0,
        })
    };

    let mut state = DVector::from_iterator(
        sys.dim(),
        mesh.nodes().iter().flat_map(|y| [y[0], y[1]]).chain(probes.iter().flat_map(|p| [p[0], p[1]])),
    );
    let first = diagnostics(0, &state, false).map_err(|e| match e {
        Error::Degenerate { .. } => Error::InvalidParameter("the pair is not complementary on the mesh".into()),
        Error::MeshResolution(m) => Error::MeshResolution(format!("initial probes: {m}")),
        e => e,
    })?;
    let mut record = DecompositionRecord {
        times: vec![z.times()[0]],
        xi: vec![Snapshot::Mesh(sys.map_of(&state))],
        psi: vec![Snapshot::Points(sys.probes_of(&state))],
        tau: z.horizon(),
        stop: StopReason::Horizon,
        stop_detail: None,
        diagnostics: vec![first],
        probes: probes.to_vec(),
        refactored_jumps: 0,
    };

    for k in 1..z.len() {
        let t = z.times()[k];
        let dz = z.continuous_increment(k);
        let jump = z.jump_at_index(k);
        let step = (|| -> Result<StepDiagnostics> {
            if dz.iter().any(|v| *v != 0.0) {
                state = heun_step_driven(&sys, &state, &dz)?;
            }
            if let Some(dz) = jump {
                state = flow_driven(&sys, dz, &state, 1.0, &cfg.marcus.ode).map_err(|e| match e {
                    Error::Degenerate { det, condition } => Error::InverseFailure(format!(
                        "jump flow lost transversality (det {det:.3e}, condition {condition:.3e})"
                    )),
                    e => e,
                })?;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure { time: t });
            }
            diagnostics(k, &state, jump.is_some())
        })();
        match step {
            Ok(d) => {
                record.times.push(t);
                record.xi.push(Snapshot::Mesh(sys.map_of(&state)));
                record.psi.push(Snapshot::Points(sys.probes_of(&state)));
                record.diagnostics.push(d);
            }
            Err(Error::InverseFailure(m)) => {
                record.tau = t;
                record.stop = StopReason::NonDecomposableJump;
                record.stop_detail = Some(m);
                break;
            }
            Err(e) => {
                let (reason, detail) = stop_of(e)?;
                record.tau = t;
                record.stop = reason;
                record.stop_detail = Some(detail);
                break;
            }
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::LinearFields;
    use crate::semimartingale::deterministic_path;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn identity_map_is_exact_and_inverts() {
        let mesh = StructuredMesh::polar_annulus(0.25, 4.0, 20, 24).unwrap();
        let id = MeshMap::identity(&mesh);
        for p in [[1.0, 0.3], [-2.0, 1.7], [0.1, -0.3]] {
            let (w, j) = id.eval_with_jacobian(&v(&p)).unwrap();
            assert!((w - v(&p)).amax() < 1e-15);
            assert!((j - DMatrix::identity(2, 2)).amax() < 1e-15);
        }
        assert!(matches!(id.eval(&v(&[5.0, 0.0])), Err(Error::MeshResolution(_))));
    }

    #[test]
    fn periodic_weights_are_smooth_through_nodes() {
        for n in [7, 40] {
            for v in [5.0, 5.0 + 1e-9, 5.0 - 3e-7, 5.01, 5.3, 0.02, 39.999] {
                let stencil = periodic_stencil(v, n);
                let eps = 1e-6;
                let (up, dn) = (periodic_stencil(v + eps, n), periodic_stencil(v - eps, n));
                assert!((stencil.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-12);
                for ((s, a), b) in stencil.iter().zip(&up).zip(&dn) {
                    let fd = (a.1 - b.1) / (2.0 * eps);
                    assert!((s.2 - fd).abs() < 1e-7, "n {n} v {v} node {}: {} vs {fd}", s.0, s.2);
                }
            }
        }
    }

    #[test]
    fn linear_map_on_cartesian_mesh() {
        // Catmull-Rom with linear end extrapolation reproduces affine maps.
        let mesh = StructuredMesh::new(MeshChart::Cartesian {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -1.0,
            y_max: 3.0,
            nx: 9,
            ny: 11,
        })
        .unwrap();
        let m = Matrix2::new(1.2, 0.3, -0.4, 0.9);
        let map = MeshMap::from_values(&mesh, mesh.nodes().iter().map(|y| m * y).collect()).unwrap();
        for p in [[0.3, 0.2], [-1.9, 2.9], [1.99, -0.99]] {
            let (w, j) = map.eval_with_jacobian(&v(&p)).unwrap();
            assert!((w - from2(&(m * to2(&v(&p)).unwrap()))).amax() < 1e-12);
            assert!((j - mat2(&m)).amax() < 1e-12);
        }
        let y = map.inverse(&v(&[0.5, 0.7]), 1e-12, 50).unwrap();
        assert!((map.eval(&y).unwrap() - v(&[0.5, 0.7])).amax() < 1e-11);
    }

    #[test]
    fn horizontal_fields_leave_psi_fixed() {
        let mesh = StructuredMesh::polar_annulus(0.25, 4.0, 16, 32).unwrap();
        let rot = LinearFields::new(vec![DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])]).unwrap();
        let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.02).collect();
        let values: Vec<_> = times.iter().map(|t| v(&[(3.0 * t).sin()])).collect();
        let z = deterministic_path(&times, &values, &[(0.5, v(&[1.0]))]).unwrap();
        let probes = vec![v(&[1.0, 0.0]), v(&[0.3, -0.9])];
        let mut cfg = DecomposeConfig::default();
        cfg.marcus.ode.substeps = 32;
        let rec = decompose_pointwise(&rot, &ComplementaryPair::spherical_radial(2), &z, &mesh, &probes, &cfg).unwrap();
        assert!(rec.reached_horizon());
        let Snapshot::Points(psi) = rec.final_psi() else { panic!() };
        for (p, q) in psi.iter().zip(&probes) {
            assert!((p - q).amax() < 1e-12);
        }
        assert!(rec.diagnostics.iter().all(|d| d.residual_sup < 1e-3 && d.psi_consistency.unwrap() < 1e-3));
    }
}
