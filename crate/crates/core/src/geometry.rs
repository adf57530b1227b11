//! Distributions of tangent subspaces, their pushforwards under
//! diffeomorphisms, transversality margins and direct-sum splitting.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marcus::{self, heun_step, MarcusConfig};
use crate::odeflow::{self, VectorFieldSet};
use crate::semimartingale::JumpPath;

/// Thresholds below/above which a pair of subspaces is treated as no longer
/// complementary. Shared by splitting, decomposition and monitoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegeneracyThresholds {
    /// Minimum `|det|` of the stacked orthonormalized bases.
    pub eps_det: f64,
    /// Maximum condition number of the stacked orthonormalized bases.
    pub condition_cap: f64,
}

impl Default for DegeneracyThresholds {
    fn default() -> Self {
        Self { eps_det: 1e-12, condition_cap: 1e8 }
    }
}

/// A rank-`k` subbundle of `T R^n`, given by a basis map.
pub trait Distribution: Send + Sync {
    fn ambient_dim(&self) -> usize;

    fn rank(&self) -> usize;

    /// `n × k` basis at `x`.
    fn basis(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn contains(&self, _x: &DVector<f64>) -> bool {
        true
    }
}

/// The same subspace everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDistribution {
    basis: DMatrix<f64>,
}

impl ConstantDistribution {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::InvalidParameter("basis must have 1..=n columns".into()));
        }
        let smallest = basis.clone().svd(false, false).singular_values.min();
        if !(smallest > 1e-14) {
            return Err(Error::InvalidParameter("basis columns are dependent".into()));
        }
        Ok(Self { basis })
    }

    /// `span{e_1, .., e_p}` in `R^n`.
    pub fn horizontal(n: usize, p: usize) -> Self {
        Self { basis: DMatrix::identity(n, n).columns(0, p).into_owned() }
    }

    /// `span{e_{p+1}, .., e_n}` in `R^n`.
    pub fn vertical(n: usize, p: usize) -> Self {
        Self { basis: DMatrix::identity(n, n).columns(p, n - p).into_owned() }
    }
}

impl Distribution for ConstantDistribution {
    fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    fn rank(&self) -> usize {
        self.basis.ncols()
    }

    fn basis(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.basis.clone())
    }
}

fn away_from_origin(x: &DVector<f64>) -> Result<f64> {
    let r = x.norm();
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::OutsideDomain("distribution undefined at the origin".into()))
    }
}

/// Lines through the origin: `span{x}` on `R^n \ {0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialDistribution {
    pub n: usize,
}

impl Distribution for RadialDistribution {
    fn ambient_dim(&self) -> usize {
        self.n
    }

    fn rank(&self) -> usize {
        1
    }

    fn basis(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        away_from_origin(x)?;
        Ok(DMatrix::from_column_slice(self.n, 1, x.as_slice()))
    }

    fn contains(&self, x: &DVector<f64>) -> bool {
        x.norm() > 0.0
    }
}

/// Tangent spaces of the spheres centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDistribution {
    pub n: usize,
}

impl Distribution for SphericalDistribution {
    fn ambient_dim(&self) -> usize {
        self.n
    }

    fn rank(&self) -> usize {
        self.n - 1
    }

    fn basis(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r = away_from_origin(x)?;
        if self.n == 2 {
            return Ok(DMatrix::from_column_slice(2, 1, &[-x[1], x[0]]));
        }
        // Householder reflection taking e_1 to x/|x|; its other columns are
        // an orthonormal basis of the orthogonal complement.
        let u = x / r;
        let mut w = u.clone();
        w[0] -= 1.0;
        let wn = w.norm_squared();
        let q = if wn < 1e-30 {
            DMatrix::identity(self.n, self.n)
        } else {
            DMatrix::identity(self.n, self.n) - (&w * w.transpose()) * (2.0 / wn)
        };
        Ok(q.columns(1, self.n - 1).into_owned())
    }

    fn contains(&self, x: &DVector<f64>) -> bool {
        x.norm() > 0.0
    }
}

type BasisFn = Arc<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;

/// Distribution from a closure.
#[derive(Clone)]
pub struct FnDistribution {
    n: usize,
    k: usize,
    f: BasisFn,
}

impl FnDistribution {
    pub fn new(n: usize, k: usize, f: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static) -> Self {
        Self { n, k, f: Arc::new(f) }
    }
}

impl Distribution for FnDistribution {
    fn ambient_dim(&self) -> usize {
        self.n
    }

    fn rank(&self) -> usize {
        self.k
    }

    fn basis(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (self.f)(x)
    }
}

/// A diffeomorphism that can be evaluated, differentiated and inverted.
pub trait DiffeoProbe: Send + Sync {
    fn dim(&self) -> usize;

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityDiffeo {
    pub n: usize,
}

impl DiffeoProbe for IdentityDiffeo {
    fn dim(&self) -> usize {
        self.n
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.clone())
    }

    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.n, self.n))
    }

    fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y.clone())
    }
}

/// `x ↦ M x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiffeo {
    m: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl LinearDiffeo {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("linear diffeomorphism must be invertible".into()))?;
        Ok(Self { m, inv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl DiffeoProbe for LinearDiffeo {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.m * x)
    }

    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.m.clone())
    }

    fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.inv * y)
    }
}

/// The time-`t_end` map of a Marcus flow along a fixed path prefix.
#[derive(Clone)]
pub struct FlowDiffeo {
    fields: Arc<dyn VectorFieldSet>,
    path: JumpPath,
    end: usize,
    cfg: MarcusConfig,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl FlowDiffeo {
    pub fn new(fields: Arc<dyn VectorFieldSet>, path: JumpPath, end: usize, cfg: MarcusConfig) -> Result<Self> {
        if end >= path.len() {
            return Err(Error::InvalidParameter("end index beyond path".into()));
        }
        Ok(Self { fields, path, end, cfg, newton_tol: 1e-10, newton_max_iter: 50 })
    }

    /// Runs the scheme backwards (reversed jumps, reversed increments) as a
    /// starting guess for the inverse.
    fn reverse_seed(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = y.clone();
        for k in (1..=self.end).rev() {
            if let Some(dz) = self.path.jump_at_index(k) {
                x = odeflow::flow(&*self.fields, &(-dz), &x, 1.0, &self.cfg.ode)?;
            }
            let dzc = self.path.continuous_increment(k);
            x = heun_step(&*self.fields, &x, &(-dzc));
        }
        Ok(x)
    }
}

impl DiffeoProbe for FlowDiffeo {
    fn dim(&self) -> usize {
        self.fields.dim()
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let traj = marcus::solve_prefix(&*self.fields, &self.path, x, &self.cfg, self.end)?;
        Ok(traj.post(self.end).clone())
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let traj = marcus::solve_prefix_with_jacobian(&*self.fields, &self.path, x, &self.cfg, self.end)?;
        Ok(traj.jacobian_post(self.end)?.clone())
    }

    fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = self.reverse_seed(y)?;
        let scale = y.amax().max(1.0);
        for _ in 0..self.newton_max_iter {
            let traj = marcus::solve_prefix_with_jacobian(&*self.fields, &self.path, &x, &self.cfg, self.end)?;
            let r = traj.post(self.end) - y;
            if r.amax() <= self.newton_tol * scale {
                return Ok(x);
            }
            let step = traj
                .jacobian_post(self.end)?
                .clone()
                .lu()
                .solve(&r)
                .ok_or_else(|| Error::InverseFailure("singular Jacobian in Newton step".into()))?;
            x -= step;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InverseFailure("Newton iterate diverged".into()));
            }
        }
        Err(Error::InverseFailure(format!("no convergence in {} iterations", self.newton_max_iter)))
    }
}

/// `Ad(ξ)Δ(x) = Dξ(ξ^{-1}x) Δ(ξ^{-1}x)`.
#[derive(Clone)]
pub struct AdjointDistribution {
    pub xi: Arc<dyn DiffeoProbe>,
    pub base: Arc<dyn Distribution>,
}

pub fn adjoint_distribution(xi: Arc<dyn DiffeoProbe>, delta: Arc<dyn Distribution>) -> Result<AdjointDistribution> {
    if xi.dim() != delta.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: delta.ambient_dim(), got: xi.dim() });
    }
    Ok(AdjointDistribution { xi, base: delta })
}

impl Distribution for AdjointDistribution {
    fn ambient_dim(&self) -> usize {
        self.base.ambient_dim()
    }

    fn rank(&self) -> usize {
        self.base.rank()
    }

    fn basis(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let pre = self.xi.inverse(x)?;
        Ok(self.xi.jacobian(&pre)? * self.base.basis(&pre)?)
    }

    fn contains(&self, x: &DVector<f64>) -> bool {
        self.xi.inverse(x).map(|p| self.base.contains(&p)).unwrap_or(false)
    }
}

/// Two distributions meant to be complementary on a shared domain.
#[derive(Clone)]
pub struct ComplementaryPair {
    pub horizontal: Arc<dyn Distribution>,
    pub vertical: Arc<dyn Distribution>,
}

impl std::fmt::Debug for ComplementaryPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComplementaryPair")
            .field("n", &self.horizontal.ambient_dim())
            .field("horizontal_rank", &self.horizontal.rank())
            .field("vertical_rank", &self.vertical.rank())
            .finish()
    }
}

impl ComplementaryPair {
    pub fn new(horizontal: Arc<dyn Distribution>, vertical: Arc<dyn Distribution>) -> Result<Self> {
        let n = horizontal.ambient_dim();
        if vertical.ambient_dim() != n || horizontal.rank() + vertical.rank() != n {
            return Err(Error::DimensionMismatch { expected: n, got: horizontal.rank() + vertical.rank() });
        }
        Ok(Self { horizontal, vertical })
    }

    /// Spheres and rays on `R^n \ {0}`.
    pub fn spherical_radial(n: usize) -> Self {
        Self { horizontal: Arc::new(SphericalDistribution { n }), vertical: Arc::new(RadialDistribution { n }) }
    }

    /// `R^p × 0` and `0 × R^{n-p}`.
    pub fn coordinate(n: usize, p: usize) -> Self {
        Self {
            horizontal: Arc::new(ConstantDistribution::horizontal(n, p)),
            vertical: Arc::new(ConstantDistribution::vertical(n, p)),
        }
    }

    /// `[B_H(x) | B_V(x)]`.
    pub fn frame(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        stack(&self.horizontal.basis(x)?, &self.vertical.basis(x)?)
    }

    pub fn check(&self, x: &DVector<f64>, thr: &DegeneracyThresholds) -> Result<Transversality> {
        check_transversality(&*self.horizontal, &*self.vertical, x, thr)
    }
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
    }
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    Ok(out)
}

/// Gram-Schmidt with one reorthogonalization pass; coordinate bases come
/// back unchanged.
fn orthonormal(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = b.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let r = q.column(i).dot(&q.column(j));
                let qi = q.column(i).into_owned();
                q.column_mut(j).axpy(-r, &qi, 1.0);
            }
        }
        let n = q.column(j).norm();
        q.column_mut(j).unscale_mut(n);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transversality {
    pub complementary: bool,
    /// `|det|` of the stacked orthonormalized bases (1 when orthogonal).
    pub det: f64,
    /// 2-norm condition number of the same matrix.
    pub condition: f64,
}

/// Compares the two subspaces through orthonormal bases, so the margins
/// depend only on the subspaces.
pub fn check_transversality(
    h: &dyn Distribution,
    d: &dyn Distribution,
    x: &DVector<f64>,
    thr: &DegeneracyThresholds,
) -> Result<Transversality> {
    let n = h.ambient_dim();
    if d.ambient_dim() != n || h.rank() + d.rank() != n {
        return Err(Error::DimensionMismatch { expected: n, got: h.rank() + d.rank() });
    }
    margins(&h.basis(x)?, &d.basis(x)?, thr)
}

/// Margins of `span(bh)` against `span(bd)`.
fn margins(bh: &DMatrix<f64>, bd: &DMatrix<f64>, thr: &DegeneracyThresholds) -> Result<Transversality> {
    if bh.nrows() == 2 && bh.ncols() == 1 && bd.ncols() == 1 {
        // Two lines in the plane at angle with cosine c and sine s: the
        // singular values are sqrt(1 ± |c|), so the condition number is
        // (1 + |c|) / s.
        let (a, b) = (bh.column(0), bd.column(0));
        let (na, nb) = (a.norm(), b.norm());
        let cross = (a[0] * b[1] - a[1] * b[0]).abs() / (na * nb);
        let c = (a.dot(&b) / (na * nb)).abs().min(1.0);
        let condition = if cross > 0.0 { (1.0 + c) / cross } else { f64::INFINITY };
        let complementary = cross > thr.eps_det && condition < thr.condition_cap && cross.is_finite();
        return Ok(Transversality { complementary, det: cross, condition });
    }
    Ok(transversality_of(&stack(&orthonormal(bh), &orthonormal(bd))?, thr))
}

fn transversality_of(frame: &DMatrix<f64>, thr: &DegeneracyThresholds) -> Transversality {
    let det = frame.clone().lu().determinant().abs();
    let sv = frame.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let complementary = det > thr.eps_det && condition < thr.condition_cap && det.is_finite();
    Transversality { complementary, det, condition }
}

/// Splits `value = h + v` with `h ∈ H(x)` and `v ∈ D(x)`.
pub fn split_field(
    value: &DVector<f64>,
    h: &dyn Distribution,
    d: &dyn Distribution,
    x: &DVector<f64>,
    thr: &DegeneracyThresholds,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let bh = h.basis(x)?;
    let bd = d.basis(x)?;
    split_with_bases(value, &bh, &bd, thr)
}

/// [`split_field`] with explicit bases.
pub fn split_with_bases(
    value: &DVector<f64>,
    bh: &DMatrix<f64>,
    bd: &DMatrix<f64>,
    thr: &DegeneracyThresholds,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let values = DMatrix::from_column_slice(value.len(), 1, value.as_slice());
    let (h, v) = split_columns(&values, bh, bd, thr)?;
    Ok((h.column(0).into_owned(), v.column(0).into_owned()))
}

/// Splits every column of `values` against the same pair of bases, checking
/// transversality once.
pub fn split_columns(
    values: &DMatrix<f64>,
    bh: &DMatrix<f64>,
    bd: &DMatrix<f64>,
    thr: &DegeneracyThresholds,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = bh.nrows();
    if bh.ncols() + bd.ncols() != n || values.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: bh.ncols() + bd.ncols() });
    }
    let t = margins(bh, bd, thr)?;
    if !t.complementary {
        return Err(Error::Degenerate { det: t.det, condition: t.condition });
    }
    let qh = orthonormal(bh);
    let m = stack(&qh, &orthonormal(bd))?;
    let lu = m.clone().lu();
    let singular = Error::Degenerate { det: 0.0, condition: f64::INFINITY };
    let mut c = lu.solve(values).ok_or(singular.clone())?;
    c += lu.solve(&(values - &m * &c)).ok_or(singular)?;
    let hp = &qh * c.rows(0, qh.ncols());
    let vp = values - &hp;
    Ok((hp, vp))
}

/// Margins of the pair of column spans, as in [`check_transversality`].
pub fn transversality_of_bases(
    bh: &DMatrix<f64>,
    bd: &DMatrix<f64>,
    thr: &DegeneracyThresholds,
) -> Result<Transversality> {
    margins(bh, bd, thr)
}

/// Orthogonal projector onto the column span of `b`.
pub fn projector(b: &DMatrix<f64>) -> DMatrix<f64> {
    let q = orthonormal(b);
    &q * q.transpose()
}

/// Largest entry of the difference of the two span projectors.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return f64::INFINITY;
    }
    (projector(a) - projector(b)).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::FnFields;
    use crate::semimartingale::deterministic_path;
    use std::f64::consts::FRAC_PI_2;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn rotation(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    #[test]
    fn adjoint_of_identity_and_linear() {
        let delta: Arc<dyn Distribution> = Arc::new(ConstantDistribution::vertical(2, 1));
        let id = adjoint_distribution(Arc::new(IdentityDiffeo { n: 2 }), delta.clone()).unwrap();
        let x = v(&[0.3, 0.9]);
        assert!(subspace_distance(&id.basis(&x).unwrap(), &delta.basis(&x).unwrap()) < 1e-15);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 3.0]);
        let lin = adjoint_distribution(Arc::new(LinearDiffeo::new(m.clone()).unwrap()), delta.clone()).unwrap();
        let me2 = m.column(1).into_owned();
        for p in [[1.0, 2.0], [-4.0, 0.1]] {
            let b = lin.basis(&v(&p)).unwrap();
            assert!(subspace_distance(&b, &DMatrix::from_column_slice(2, 1, me2.as_slice())) < 1e-14);
        }
    }

    #[test]
    fn adjoint_of_rotation() {
        let theta = 0.8;
        let delta: Arc<dyn Distribution> = Arc::new(ConstantDistribution::vertical(2, 1));
        let ad = adjoint_distribution(Arc::new(LinearDiffeo::new(rotation(theta)).unwrap()), delta).unwrap();
        let want = DMatrix::from_column_slice(2, 1, &[-theta.sin(), theta.cos()]);
        assert!(subspace_distance(&ad.basis(&v(&[0.2, 0.2])).unwrap(), &want) < 1e-14);
    }

    #[test]
    fn flow_diffeo_inverts() {
        let fields: Arc<dyn VectorFieldSet> =
            Arc::new(FnFields::new(2).with_fd_field(|x| v(&[-x[1] + 0.2 * x[0] * x[0], x[0]])));
        let fine: Vec<f64> = (0..=50).map(|k| k as f64 / 50.0).collect();
        let values: Vec<_> = fine.iter().map(|t| v(&[(2.0 * t).sin()])).collect();
        let path = deterministic_path(&fine, &values, &[(0.4, v(&[0.5]))]).unwrap();
        let end = path.len() - 1;
        let xi = FlowDiffeo::new(fields, path, end, MarcusConfig::default()).unwrap();
        for p in [[0.5, -0.3], [1.0, 0.4]] {
            let y = xi.forward(&v(&p)).unwrap();
            let x = xi.inverse(&y).unwrap();
            assert!((xi.forward(&x).unwrap() - &y).amax() < 1e-10);
            assert!((x - v(&p)).amax() < 1e-9);
        }
    }

    #[test]
    fn transversality_cases() {
        let thr = DegeneracyThresholds::default();
        let h = ConstantDistribution::horizontal(2, 1);
        let t = check_transversality(&h, &ConstantDistribution::vertical(2, 1), &v(&[0.0, 0.0]), &thr).unwrap();
        assert!(t.complementary);
        assert!((t.condition - 1.0).abs() < 1e-14);

        let ad_at = |theta: f64| {
            ConstantDistribution::new(rotation(theta) * DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap()
        };
        let t = check_transversality(&h, &ad_at(FRAC_PI_2), &v(&[0.0, 0.0]), &thr).unwrap();
        assert!(!t.complementary);

        // Stacked [e1 | (-sinθ, cosθ)]: singular values sqrt(1 ± sinθ), so the
        // condition number is (1 + sinθ) / cosθ.
        let mut last = 0.0;
        for eps in [0.3, 0.1, 0.03, 0.01] {
            let theta = FRAC_PI_2 - eps;
            let t = check_transversality(&h, &ad_at(theta), &v(&[0.0, 0.0]), &thr).unwrap();
            let want = (1.0 + theta.sin()) / theta.cos();
            assert!(t.complementary);
            assert!((t.condition / want - 1.0).abs() < 1e-10);
            assert!(t.condition > last);
            last = t.condition;
        }
        assert!(last > 100.0 && last < 300.0);

        let bad = check_transversality(&h, &ConstantDistribution::horizontal(2, 2), &v(&[0.0, 0.0]), &thr);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn split_cases() {
        let thr = DegeneracyThresholds::default();
        let h = ConstantDistribution::horizontal(2, 1);
        let (a, b) = (1.5, -0.7);
        let (hp, vp) = split_field(&v(&[a, b]), &h, &ConstantDistribution::vertical(2, 1), &v(&[0.0, 0.0]), &thr).unwrap();
        assert_eq!(hp, v(&[a, 0.0]));
        assert_eq!(vp, v(&[0.0, b]));

        // Against (-tanθ, 1): X = (a, b) = (a + b tanθ, 0) + b (-tanθ, 1).
        let theta: f64 = 0.6;
        let ad = ConstantDistribution::new(DMatrix::from_column_slice(2, 1, &[-theta.sin(), theta.cos()])).unwrap();
        let (hp, vp) = split_field(&v(&[a, b]), &h, &ad, &v(&[0.0, 0.0]), &thr).unwrap();
        assert!((hp - v(&[a + b * theta.tan(), 0.0])).amax() < 1e-14);
        assert!((&vp - v(&[-b * theta.tan(), b])).amax() < 1e-14);
        let (hh, hv) = split_field(&v(&[1.0, 0.0]), &h, &ad, &v(&[0.0, 0.0]), &thr).unwrap();
        assert!((hh - v(&[1.0, 0.0])).amax() < 1e-15);
        assert!(hv.amax() < 1e-15);

        let ad = ConstantDistribution::new(DMatrix::from_column_slice(2, 1, &[1.0, 1e-13])).unwrap();
        assert!(matches!(
            split_field(&v(&[a, b]), &h, &ad, &v(&[0.0, 0.0]), &thr),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn planar_margins_match_general_path() {
        let thr = DegeneracyThresholds::default();
        for (a, b) in [([1.0, 0.2], [0.3, -2.0]), ([0.5, 0.5], [0.5, 0.5001]), ([-1.0, 3.0], [2.0, 0.1])] {
            let bh = DMatrix::from_column_slice(2, 1, &a);
            let bd = DMatrix::from_column_slice(2, 1, &b);
            let fast = margins(&bh, &bd, &thr).unwrap();
            let slow = transversality_of(&stack(&orthonormal(&bh), &orthonormal(&bd)).unwrap(), &thr);
            assert!((fast.det - slow.det).abs() < 1e-12);
            assert!((fast.condition / slow.condition - 1.0).abs() < 1e-8);
            assert_eq!(fast.complementary, slow.complementary);
        }
    }

    #[test]
    fn spherical_basis_is_tangent() {
        let s = SphericalDistribution { n: 4 };
        let x = v(&[0.3, -1.0, 2.0, 0.5]);
        let b = s.basis(&x).unwrap();
        assert!((b.transpose() * &x).amax() < 1e-14);
        assert!((b.transpose() * &b - DMatrix::identity(3, 3)).amax() < 1e-14);
        assert!(s.basis(&DVector::zeros(4)).is_err());
        let e1 = SphericalDistribution { n: 3 }.basis(&v(&[2.0, 0.0, 0.0])).unwrap();
        assert!((e1.transpose() * v(&[1.0, 0.0, 0.0])).amax() < 1e-15);
    }
}
