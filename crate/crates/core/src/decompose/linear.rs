use nalgebra::{DMatrix, DVector};

use super::{
    decompose_linear_algebraic, DecomposeConfig, DecompositionRecord, LinearFactors, Snapshot, StepDiagnostics,
    StopReason,
};
use crate::error::{Error, Result};
use crate::geometry::{split_columns, transversality_of_bases, DegeneracyThresholds};
use crate::marcus::{heun_step_driven, solve_with_jacobian};
use crate::odeflow::{expm, flow_driven, DrivenSystem, LinearFields, VectorFieldSet};
use crate::semimartingale::JumpPath;

/// Fields `X^i(x) = A_i x` with the horizontal block `R^p × 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    fields: LinearFields,
    p: usize,
}

impl LinearSystem {
    pub fn new(matrices: Vec<DMatrix<f64>>, p: usize) -> Result<Self> {
        let fields = LinearFields::new(matrices)?;
        let n = fields.dim();
        if p == 0 || p >= n {
            return Err(Error::InvalidParameter(format!("block split {p} must lie in 1..{n}")));
        }
        Ok(Self { fields, p })
    }

    pub fn dim(&self) -> usize {
        self.fields.dim()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn fields(&self) -> &LinearFields {
        &self.fields
    }

    fn horizontal_basis(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()).columns(0, self.p).into_owned()
    }
}

/// `(ξ, ψ)` stacked column-major into one vector. The drift splits
/// `A ξ` column by column into `Δ^H` and `ξ·(0 × R^{n-p})`:
/// `dξ = (Aξ)_H`, `dψ = ξ⁻¹ (Aξ)_V ψ`.
struct CoupledFactors<'a> {
    sys: &'a LinearSystem,
    bh: DMatrix<f64>,
    thr: DegeneracyThresholds,
}

impl CoupledFactors<'_> {
    fn unpack(&self, s: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.sys.dim();
        let nn = n * n;
        (
            DMatrix::from_column_slice(n, n, &s.as_slice()[..nn]),
            DMatrix::from_column_slice(n, n, &s.as_slice()[nn..]),
        )
    }
}

fn pack(xi: &DMatrix<f64>, psi: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(xi.len() + psi.len(), xi.iter().chain(psi.iter()).copied())
}

impl DrivenSystem for CoupledFactors<'_> {
    fn dim(&self) -> usize {
        2 * self.sys.dim() * self.sys.dim()
    }

    fn drive(&self, s: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>> {
        let (xi, psi) = self.unpack(s);
        let n = self.sys.dim();
        let p = self.sys.p;
        let a = self
            .sys
            .fields
            .combined_linear(weights)
            .ok_or_else(|| Error::InvalidParameter("linear system lost its matrices".into()))?;
        let bv = xi.columns(p, n - p).into_owned();
        let (h, v) = split_columns(&(a * &xi), &self.bh, &bv, &self.thr)?;
        let xi_inv_v = xi
            .lu()
            .solve(&v)
            .ok_or(Error::Degenerate { det: 0.0, condition: f64::INFINITY })?;
        Ok(pack(&h, &(xi_inv_v * psi)))
    }
}

/// Forces the block structure back and returns the largest change.
fn renormalize(xi: &mut DMatrix<f64>, psi: &mut DMatrix<f64>, p: usize) -> f64 {
    let n = xi.nrows();
    let mut dev: f64 = 0.0;
    for i in p..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((xi[(i, j)] - want).abs());
            xi[(i, j)] = want;
        }
    }
    for i in 0..p {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((psi[(i, j)] - want).abs());
            psi[(i, j)] = want;
        }
    }
    dev
}

fn block_det(m: &DMatrix<f64>, p: usize) -> f64 {
    let q = m.nrows() - p;
    m.view((p, p), (q, q)).into_owned().determinant()
}

/// Integrates the matrix-valued component equations for `ξ_t` and `ψ_t`
/// with Heun steps on the continuous part and the coupled unit-time flow at
/// jumps. Stops at the first loss of transversality, sign change of the
/// block determinant, or jump onto a non-factorizable map.
pub fn decompose_linear_sde(sys: &LinearSystem, z: &JumpPath, cfg: &DecomposeConfig) -> Result<DecompositionRecord> {
    if z.dim() != sys.fields.count() {
        return Err(Error::DimensionMismatch { expected: sys.fields.count(), got: z.dim() });
    }
    let n = sys.dim();
    let p = sys.p;
    let thr = cfg.thresholds;
    let coupled = CoupledFactors { sys, bh: sys.horizontal_basis(), thr };
    let reference = solve_with_jacobian(&sys.fields, z, &DVector::zeros(n), &cfg.marcus)?;

    let diag = |t: f64, xi: &DMatrix<f64>, psi: &DMatrix<f64>, phi: &DMatrix<f64>, is_jump: bool, dev: f64| {
        let margins = transversality_of_bases(&coupled.bh, &xi.columns(p, n - p).into_owned(), &thr)?;
        Ok::<_, Error>(StepDiagnostics {
            t,
            det_block: block_det(psi, p),
            condition: margins.condition,
            residual_sup: (xi * psi - phi).amax(),
            is_jump,
            psi_consistency: None,
            renorm_deviation: dev,
        })
    };

    let mut xi = DMatrix::identity(n, n);
    let mut psi = DMatrix::identity(n, n);
    let mut record = DecompositionRecord {
        times: vec![z.times()[0]],
        xi: vec![Snapshot::Matrix(xi.clone())],
        psi: vec![Snapshot::Matrix(psi.clone())],
        tau: z.horizon(),
        stop: StopReason::Horizon,
        stop_detail: None,
        diagnostics: vec![diag(z.times()[0], &xi, &psi, reference.jacobian_post(0)?, false, 0.0)?],
        probes: Vec::new(),
        refactored_jumps: 0,
    };
    let mut det_prev = block_det(&psi, p);

    for k in 1..z.len() {
        let t = z.times()[k];
        let stop = |record: &mut DecompositionRecord, reason| {
            record.tau = t;
            record.stop = reason;
        };

        let dz = z.continuous_increment(k);
        let mut dev = 0.0;
        if dz.iter().any(|v| *v != 0.0) {
            match heun_step_driven(&coupled, &pack(&xi, &psi), &dz) {
                Ok(s) => {
                    let (mut nxi, mut npsi) = coupled.unpack(&s);
                    if nxi.iter().chain(npsi.iter()).any(|v| !v.is_finite()) {
                        return Err(Error::IntegrationFailure { time: t });
                    }
                    dev = renormalize(&mut nxi, &mut npsi, p);
                    xi = nxi;
                    psi = npsi;
                }
                Err(Error::Degenerate { .. }) => {
                    stop(&mut record, StopReason::Degenerate);
                    break;
                }
                Err(e) => return Err(e),
            }
            let det = block_det(&psi, p);
            let margins = transversality_of_bases(&coupled.bh, &xi.columns(p, n - p).into_owned(), &thr)?;
            // The factor equations are singular at the degenerate set, so the
            // block of the directly solved flow is checked as well.
            let det_ref = block_det(reference.jacobian_pre(k)?, p);
            let det_ref_prev = block_det(reference.jacobian_post(k - 1)?, p);
            let crossed = det.signum() != det_prev.signum() || det_ref.signum() != det_ref_prev.signum();
            if !(det.abs() > thr.eps_det) || !(det_ref.abs() > thr.eps_det) || crossed || !margins.complementary {
                stop(&mut record, StopReason::Degenerate);
                break;
            }
        }

        let mut is_jump = false;
        if let Some(jump) = z.jump_at_index(k) {
            is_jump = true;
            let a = sys.fields.combined_linear(jump).expect("linear fields");
            let target = expm(&a) * &xi * &psi;
            let (fxi, fpsi) = match decompose_linear_algebraic(&target, p, thr.eps_det)? {
                LinearFactors::Degenerate { .. } => {
                    stop(&mut record, StopReason::NonDecomposableJump);
                    break;
                }
                LinearFactors::Factors { xi, psi, .. } => (xi, psi),
            };
            let integrated = flow_driven(&coupled, jump, &pack(&xi, &psi), 1.0, &cfg.marcus.ode)
                .ok()
                .map(|s| coupled.unpack(&s))
                .filter(|(a, b)| (a * b - &target).amax() <= cfg.jump_tolerance * target.amax().max(1.0));
            match integrated {
                Some((mut a, mut b)) => {
                    dev = f64::max(dev, renormalize(&mut a, &mut b, p));
                    xi = a;
                    psi = b;
                }
                None => {
                    record.refactored_jumps += 1;
                    xi = fxi;
                    psi = fpsi;
                }
            }
        }

        det_prev = block_det(&psi, p);
        record.times.push(t);
        record.xi.push(Snapshot::Matrix(xi.clone()));
        record.psi.push(Snapshot::Matrix(psi.clone()));
        record.diagnostics.push(diag(t, &xi, &psi, reference.jacobian_post(k)?, is_jump, dev)?);
    }
    Ok(record)
}
