use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A finite family `X = (X^1, .., X^m)` of smooth vector fields on `R^n`.
pub trait VectorFieldSet: Send + Sync {
    fn dim(&self) -> usize;

    fn count(&self) -> usize;

    /// `X^i(x)`.
    fn eval(&self, i: usize, x: &DVector<f64>) -> DVector<f64>;

    /// Derivative of `X^i` at `x`.
    fn jacobian(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64>;

    /// `Some(A_i)` when `X^i(x) = A_i x`.
    fn linear_matrix(&self, _i: usize) -> Option<&DMatrix<f64>> {
        None
    }

    /// `Σ_i w_i X^i(x)`.
    fn combine(&self, weights: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                out.axpy(w, &self.eval(i, x), 1.0);
            }
        }
        out
    }

    /// `Σ_i w_i X'^i(x)`.
    fn combine_jacobian(&self, weights: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                out += self.jacobian(i, x) * w;
            }
        }
        out
    }

    /// The `n × m` matrix with columns `X^i(x)`.
    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.count());
        for i in 0..self.count() {
            out.set_column(i, &self.eval(i, x));
        }
        out
    }

    /// `Σ_i w_i A_i` when every field carrying a nonzero weight is linear.
    fn combined_linear(&self, weights: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                out += self.linear_matrix(i)? * w;
            }
        }
        Some(out)
    }
}

/// Linear fields `X^i(x) = A_i x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFields {
    dim: usize,
    matrices: Vec<DMatrix<f64>>,
}

impl LinearFields {
    pub fn new(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::InvalidParameter("need at least one field".into()))?;
        let dim = first.nrows();
        for a in &matrices {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: a.nrows().max(a.ncols()) });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite matrix entry".into()));
            }
        }
        Ok(Self { dim, matrices })
    }

    /// `m` copies of the zero field on `R^n`.
    pub fn zero(n: usize, m: usize) -> Self {
        Self { dim: n, matrices: vec![DMatrix::zeros(n, n); m] }
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }
}

impl VectorFieldSet for LinearFields {
    fn dim(&self) -> usize {
        self.dim
    }

    fn count(&self) -> usize {
        self.matrices.len()
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.matrices[i] * x
    }

    fn jacobian(&self, i: usize, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrices[i].clone()
    }

    fn linear_matrix(&self, i: usize) -> Option<&DMatrix<f64>> {
        Some(&self.matrices[i])
    }
}

pub type FieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Fields given by closures. A field pushed without an analytic Jacobian
/// uses central differences.
#[derive(Clone)]
pub struct FnFields {
    dim: usize,
    fields: Vec<(FieldFn, Option<JacobianFn>)>,
}

impl FnFields {
    pub fn new(dim: usize) -> Self {
        Self { dim, fields: Vec::new() }
    }

    pub fn with_field(
        mut self,
        eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.fields.push((Arc::new(eval), Some(Arc::new(jacobian))));
        self
    }

    pub fn with_fd_field(
        mut self,
        eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.fields.push((Arc::new(eval), None));
        self
    }
}

impl std::fmt::Debug for FnFields {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnFields")
            .field("dim", &self.dim)
            .field("count", &self.fields.len())
            .finish()
    }
}

impl VectorFieldSet for FnFields {
    fn dim(&self) -> usize {
        self.dim
    }

    fn count(&self) -> usize {
        self.fields.len()
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.fields[i].0)(x)
    }

    fn jacobian(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.fields[i].1 {
            Some(jac) => jac(x),
            None => central_difference_jacobian(&*self.fields[i].0, x),
        }
    }
}

/// Central-difference Jacobian with a per-coordinate step `~ eps^(1/3)`.
pub fn central_difference_jacobian(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = 6e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(&xp) - f(&xm)) / (xp[j] - xm[j]));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, n, |r, c| cols[c][r])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonlinear() -> FnFields {
        FnFields::new(2)
            .with_field(
                |x| DVector::from_vec(vec![x[1] * x[1], x[0]]),
                |x| DMatrix::from_row_slice(2, 2, &[0.0, 2.0 * x[1], 1.0, 0.0]),
            )
            .with_field(
                |x| DVector::from_vec(vec![x[0].sin(), x[0] * x[1]]),
                |x| DMatrix::from_row_slice(2, 2, &[x[0].cos(), 0.0, x[1], x[0]]),
            )
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let f = nonlinear();
        for probe in [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]] {
            let x = DVector::from_column_slice(&probe);
            for i in 0..f.count() {
                let fd = central_difference_jacobian(&|y| f.eval(i, y), &x);
                assert!((fd - f.jacobian(i, &x)).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_fields_are_flagged() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let f = LinearFields::new(vec![a.clone(), a.transpose()]).unwrap();
        let x = DVector::from_vec(vec![0.4, -2.0]);
        assert_eq!(f.eval(0, &x), &a * &x);
        let w = DVector::from_vec(vec![2.0, 0.5]);
        let combined = f.combined_linear(&w).unwrap();
        assert!((combined * &x - f.combine(&w, &x)).amax() < 1e-15);
        assert!(nonlinear().combined_linear(&w).is_none());
        assert!(nonlinear().combined_linear(&DVector::zeros(2)).is_some());
    }

    #[test]
    fn field_matrix_columns() {
        let f = nonlinear();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let m = f.matrix(&x);
        assert_eq!(m.column(0).into_owned(), f.eval(0, &x));
        assert_eq!(m.column(1).into_owned(), f.eval(1, &x));
    }
}
