//! Factorization of a flow `φ_t = ξ_t ∘ ψ_t` into a horizontal and a
//! vertical component, up to the first time the factorization breaks down.
//!
//! Two representations: matrices for linear systems ([`decompose_linear_sde`])
//! and mesh maps for general fields in the plane ([`decompose_pointwise`]).

mod linear;
mod mesh;
mod monitor;

pub use linear::{decompose_linear_sde, LinearSystem};
pub use mesh::{decompose_pointwise, MeshChart, MeshMap, StructuredMesh};
pub use monitor::{validity_monitor, Chart, MonitorReport};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DegeneracyThresholds;
use crate::marcus::MarcusConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    pub marcus: MarcusConfig,
    pub thresholds: DegeneracyThresholds,
    /// Largest accepted mismatch between the integrated jump factors and the
    /// refactored jump target (linear mode).
    pub jump_tolerance: f64,
    /// Mesh-map inversion.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            marcus: MarcusConfig::default(),
            thresholds: DegeneracyThresholds::default(),
            jump_tolerance: 1e-8,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }
}

/// Why the record ends where it does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Horizon,
    /// The pair `Δ^H`, `Ad(ξ)Δ^V` lost transversality along the continuous
    /// part, or the block determinant changed sign between grid points.
    Degenerate,
    /// A jump landed on a map with no factorization.
    NonDecomposableJump,
    /// The mesh map could not be inverted; a numerical limit, not a
    /// property of the flow.
    MeshResolution,
}

/// Per-time-step diagnostics, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    /// Linear mode: `det` of the lower-right block of `ξψ`. Mesh mode: the
    /// smallest frame determinant of `[Δ^H | Ad(ξ)Δ^V]` over the mesh.
    pub det_block: f64,
    /// Largest transversality condition number.
    pub condition: f64,
    /// `sup |ξ_t ∘ ψ_t − φ_t|` over the reference points.
    pub residual_sup: f64,
    pub is_jump: bool,
    /// Mesh mode: `sup |ψ^SDE − ξ^{-1} ∘ φ|` over probes.
    pub psi_consistency: Option<f64>,
    /// Size of the correction that restored the block structure.
    pub renorm_deviation: f64,
}

/// A component map at one time.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Matrix(DMatrix<f64>),
    Mesh(MeshMap),
    /// Values at the record's probes.
    Points(Vec<DVector<f64>>),
}

impl Snapshot {
    /// Applies the map to `x`, or to probe `j` for [`Snapshot::Points`].
    pub fn apply(&self, j: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Snapshot::Matrix(m) => Ok(m * x),
            Snapshot::Mesh(map) => map.eval(x),
            Snapshot::Points(values) => values
                .get(j)
                .cloned()
                .ok_or_else(|| Error::InvalidParameter(format!("probe {j} not in snapshot"))),
        }
    }

    fn csv_cells(&self) -> Vec<f64> {
        match self {
            Snapshot::Matrix(m) => m.transpose().as_slice().to_vec(),
            Snapshot::Mesh(map) => map.values().iter().flat_map(|v| v.iter().copied()).collect(),
            Snapshot::Points(values) => values.iter().flat_map(|v| v.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRecord {
    /// Grid times up to the last valid one.
    pub times: Vec<f64>,
    pub xi: Vec<Snapshot>,
    pub psi: Vec<Snapshot>,
    /// Stopping time; the horizon when the record runs to the end.
    pub tau: f64,
    pub stop: StopReason,
    /// What tripped the stop, when it was not the horizon.
    pub stop_detail: Option<String>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Reference points (mesh mode probes; empty in linear mode).
    pub probes: Vec<DVector<f64>>,
    /// Jumps whose factors were recomputed algebraically because the
    /// integrated ones missed the target.
    pub refactored_jumps: usize,
}

impl DecompositionRecord {
    pub fn reached_horizon(&self) -> bool {
        self.stop == StopReason::Horizon
    }

    pub fn final_xi(&self) -> &Snapshot {
        self.xi.last().expect("record holds the initial state")
    }

    pub fn final_psi(&self) -> &Snapshot {
        self.psi.last().expect("record holds the initial state")
    }

    /// One row per time, `time` followed by the row-major cells.
    pub fn snapshots_csv(&self, which: &[Snapshot]) -> String {
        let mut out = String::from("time,cells\n");
        for (t, s) in self.times.iter().zip(which) {
            out.push_str(&format!("{t:.17e}"));
            for c in s.csv_cells() {
                out.push_str(&format!(",{c:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Algebraic factorization of a matrix in block coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearFactors {
    Factors { xi: DMatrix<f64>, psi: DMatrix<f64>, det: f64 },
    Degenerate { det: f64 },
}

/// With `M = [[M11, M12], [M21, M22]]` split after row/column `p`:
/// `ψ = [[I, 0], [M21, M22]]` and `ξ = [[M11 − M12 M22⁻¹ M21, M12 M22⁻¹], [0, I]]`.
pub fn decompose_linear_algebraic(m: &DMatrix<f64>, p: usize, eps_det: f64) -> Result<LinearFactors> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
    }
    if p == 0 || p >= n {
        return Err(Error::InvalidParameter(format!("block split {p} must lie in 1..{n}")));
    }
    let q = n - p;
    let m22 = m.view((p, p), (q, q)).into_owned();
    let det = m22.determinant();
    if !(det.abs() > eps_det) {
        return Ok(LinearFactors::Degenerate { det });
    }
    let m22_inv = m22.clone().try_inverse().ok_or(Error::Degenerate { det, condition: f64::INFINITY })?;
    let m11 = m.view((0, 0), (p, p));
    let m12 = m.view((0, p), (p, q));
    let m21 = m.view((p, 0), (q, p));
    let b = m12 * &m22_inv;

    let mut xi = DMatrix::identity(n, n);
    xi.view_mut((0, 0), (p, p)).copy_from(&(m11 - &b * m21));
    xi.view_mut((0, p), (p, q)).copy_from(&b);
    let mut psi = DMatrix::identity(n, n);
    psi.view_mut((p, 0), (q, p)).copy_from(&m21);
    psi.view_mut((p, p), (q, q)).copy_from(&m22);
    Ok(LinearFactors::Factors { xi, psi, det })
}

/// `sup_j |ξ_t(ψ_t(x_j)) − φ_t(x_j)|` for each recorded time, where
/// `flow(k, x)` is `φ_{t_k}(x)`.
pub fn verify_composition(
    record: &DecompositionRecord,
    probes: &[DVector<f64>],
    flow: &dyn Fn(usize, &DVector<f64>) -> Result<DVector<f64>>,
) -> Result<Vec<f64>> {
    (0..record.times.len())
        .map(|k| {
            let mut sup: f64 = 0.0;
            for (j, x) in probes.iter().enumerate() {
                let y = record.psi[k].apply(j, x)?;
                let w = record.xi[k].apply(j, &y)?;
                sup = sup.max((w - flow(k, x)?).amax());
            }
            Ok(sup)
        })
        .collect()
}
