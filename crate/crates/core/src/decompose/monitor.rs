use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::ComplementaryPair;
use crate::marcus::Trajectory;

/// Coordinates in which the lower-right block of `Dφ` is read.
#[derive(Clone)]
pub enum Chart {
    /// Split after coordinate `p`.
    Block { p: usize },
    /// Frames `[B_H | B_V]` of the pair at the base point and at its image.
    Adapted(ComplementaryPair),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    pub times: Vec<f64>,
    pub det_pre: Vec<f64>,
    pub det_post: Vec<f64>,
    pub tau: f64,
    /// Grid index of `tau`, `None` when the horizon was reached.
    pub tau_index: Option<usize>,
}

/// Determinant of the lower-right block of the flow Jacobian along `traj`,
/// both before and after each jump. `τ` is the first grid time at which the
/// determinant is below `eps_det` in absolute value, or changes sign since
/// the previous grid time.
pub fn validity_monitor(traj: &Trajectory, chart: &Chart, eps_det: f64) -> Result<MonitorReport> {
    if !traj.has_jacobians() {
        return Err(Error::MissingJacobians);
    }
    let n = traj.pre(0).len();
    let x0 = traj.pre(0);
    let p_of = |p: usize| {
        if p == 0 || p >= n {
            Err(Error::InvalidParameter(format!("block split {p} must lie in 1..{n}")))
        } else {
            Ok(p)
        }
    };
    let (p, frame0) = match chart {
        Chart::Block { p } => (p_of(*p)?, None),
        Chart::Adapted(pair) => (p_of(pair.horizontal.rank())?, Some(pair.frame(x0)?)),
    };
    let q = n - p;

    let det_of = |jac: &DMatrix<f64>, image: &nalgebra::DVector<f64>| -> Result<f64> {
        let adapted = match (chart, &frame0) {
            (Chart::Adapted(pair), Some(f0)) => {
                let f1 = pair.frame(image)?;
                f1.lu()
                    .solve(&(jac * f0))
                    .ok_or(Error::Degenerate { det: 0.0, condition: f64::INFINITY })?
            }
            _ => jac.clone(),
        };
        Ok(adapted.view((p, p), (q, q)).into_owned().determinant())
    };

    let mut report = MonitorReport {
        times: Vec::with_capacity(traj.len()),
        det_pre: Vec::with_capacity(traj.len()),
        det_post: Vec::with_capacity(traj.len()),
        tau: traj.final_time(),
        tau_index: None,
    };
    let mut prev: Option<f64> = None;
    for k in 0..traj.len() {
        let pre = det_of(traj.jacobian_pre(k)?, traj.pre(k))?;
        let post = if traj.is_jump(k) { det_of(traj.jacobian_post(k)?, traj.post(k))? } else { pre };
        report.times.push(traj.times()[k]);
        report.det_pre.push(pre);
        report.det_post.push(post);
        if report.tau_index.is_none() {
            let crossed = prev.is_some_and(|d| d.signum() != pre.signum());
            if !(pre.abs() > eps_det) || crossed || !(post.abs() > eps_det) {
                report.tau = traj.times()[k];
                report.tau_index = Some(k);
            }
        }
        prev = Some(post);
    }
    Ok(report)
}
