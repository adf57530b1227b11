//! Closed-form oracles for tests and verification runs.
//!
//! Nothing here calls into the integrators; the matrix exponential is a
//! separate Taylor implementation so that it can check the Padé one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An oracle value together with how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub method: &'static str,
    /// Claimed absolute accuracy.
    pub error_bound: f64,
}

/// `exp(t A)` by Taylor series with scaling and squaring.
pub fn matrix_exp(a: &DMatrix<f64>, t: f64) -> OracleResult<DMatrix<f64>> {
    let n = a.nrows();
    let b = a * t;
    let norm = b.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    // Scale until the norm is at most 1/2; 30 Taylor terms then leave
    // a truncation error far below unit roundoff.
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let b = b / 2f64.powi(s);
    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    OracleResult { value: sum, method: "taylor-scaling-squaring", error_bound: 1e-12 }
}

/// Plain truncated power series, without scaling. Only accurate for small
/// `|A|`; used to cross-check [`matrix_exp`].
pub fn matrix_exp_series(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=terms {
        term = &term * a / k as f64;
        sum += &term;
    }
    sum
}

/// Factors of the rotation by `z` into a horizontal and a vertical part.
#[derive(Debug, Clone, PartialEq)]
pub enum RotationFactors {
    Factors { xi: DMatrix<f64>, psi: DMatrix<f64> },
    Degenerate { cos: f64 },
}

/// `R(z) = [[sec z, -tan z], [0, 1]] · [[1, 0], [sin z, cos z]]`.
pub fn rotation_decomposition(z: f64) -> OracleResult<RotationFactors> {
    let (s, c) = z.sin_cos();
    let value = if c.abs() <= 1e-12 {
        RotationFactors::Degenerate { cos: c }
    } else {
        RotationFactors::Factors {
            xi: DMatrix::from_row_slice(2, 2, &[1.0 / c, -s / c, 0.0, 1.0]),
            psi: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, s, c]),
        }
    };
    OracleResult { value, method: "rotation-closed-form", error_bound: 1e-15 }
}

pub fn rotation_matrix(z: f64) -> DMatrix<f64> {
    let (s, c) = z.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Radial/spherical factors of an invertible linear map, evaluated on probes.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialFactors {
    pub probes: Vec<DVector<f64>>,
    /// `ψ(x) = |Mx| x / |x|`.
    pub psi: Vec<DVector<f64>>,
    /// `ξ(ψ(x))`, which equals `Mx`.
    pub xi_of_psi: Vec<DVector<f64>>,
}

/// `ψ(x) = |Mx| x/|x|` preserves rays, `ξ(y) = |y| M(y/|y|)/|M(y/|y|)|`
/// preserves spheres, and `ξ∘ψ = M`.
pub fn radial_psi(m: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let r = x.norm();
    if r == 0.0 {
        return Err(Error::OutsideDomain("origin".into()));
    }
    Ok(x * ((m * x).norm() / r))
}

pub fn radial_xi(m: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let r = y.norm();
    if r == 0.0 {
        return Err(Error::OutsideDomain("origin".into()));
    }
    let image = m * (y / r);
    let len = image.norm();
    if len == 0.0 {
        return Err(Error::InvalidParameter("map is singular on a probe direction".into()));
    }
    Ok(image * (r / len))
}

/// Evaluates both factors on `probes` and rejects the oracle if the
/// composition identity fails anywhere by more than `1e-12` (relative).
pub fn radial_decomposition(m: &DMatrix<f64>, probes: &[DVector<f64>]) -> Result<OracleResult<RadialFactors>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidParameter("matrix must be square".into()));
    }
    if m.clone().lu().determinant() == 0.0 {
        return Err(Error::InvalidParameter("matrix must be invertible".into()));
    }
    let mut psi = Vec::with_capacity(probes.len());
    let mut xi_of_psi = Vec::with_capacity(probes.len());
    for x in probes {
        let p = radial_psi(m, x)?;
        let y = radial_xi(m, &p)?;
        let direct = m * x;
        if (&y - &direct).amax() > 1e-12 * direct.amax().max(1.0) {
            return Err(Error::InvalidParameter(format!("radial self-check failed at {x:?}")));
        }
        psi.push(p);
        xi_of_psi.push(y);
    }
    Ok(OracleResult {
        value: RadialFactors { probes: probes.to_vec(), psi, xi_of_psi },
        method: "radial-closed-form",
        error_bound: 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    #[test]
    fn exp_basics() {
        assert_eq!(matrix_exp(&DMatrix::zeros(3, 3), 1.0).value, DMatrix::identity(3, 3));
        let g = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let q = matrix_exp(&g, FRAC_PI_2).value;
        assert!((q - DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn exp_agrees_with_plain_series() {
        let a = DMatrix::from_row_slice(3, 3, &[0.4, -0.3, 0.9, 0.1, 0.2, -0.5, -0.6, 0.7, -0.1]);
        let e = matrix_exp(&a, 1.0).value;
        let s = matrix_exp_series(&a, 40);
        assert!((e - s).amax() < 1e-12);
    }

    #[test]
    fn rotation_factors() {
        match rotation_decomposition(0.0).value {
            RotationFactors::Factors { xi, psi } => {
                assert_eq!(xi, DMatrix::identity(2, 2));
                assert_eq!(psi, DMatrix::identity(2, 2));
            }
            _ => panic!("identity is decomposable"),
        }
        match rotation_decomposition(FRAC_PI_4).value {
            RotationFactors::Factors { xi, psi } => {
                let want_xi = DMatrix::from_row_slice(2, 2, &[SQRT_2, -1.0, 0.0, 1.0]);
                let want_psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, SQRT_2 / 2.0, SQRT_2 / 2.0]);
                assert!((&xi - want_xi).amax() < 1e-14);
                assert!((&psi - want_psi).amax() < 1e-15);
                assert!((xi * psi - rotation_matrix(FRAC_PI_4)).amax() < 1e-12);
            }
            _ => panic!(),
        }
        assert!(matches!(rotation_decomposition(FRAC_PI_2).value, RotationFactors::Degenerate { .. }));
        assert!(matches!(
            rotation_decomposition(-3.0 * FRAC_PI_2).value,
            RotationFactors::Degenerate { .. }
        ));
    }

    #[test]
    fn rotation_self_consistency() {
        for k in 0..200 {
            let z = -3.0 + 6.0 * k as f64 / 199.0;
            if let RotationFactors::Factors { xi, psi } = rotation_decomposition(z).value {
                if z.cos().abs() > 1e-3 {
                    assert!((xi * psi - rotation_matrix(z)).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn radial_special_cases() {
        let probes: Vec<_> = [[1.0, 0.0], [0.3, -2.0], [-1.5, 0.5]]
            .iter()
            .map(|p| DVector::from_column_slice(p))
            .collect();
        let q = rotation_matrix(0.7);
        let r = radial_decomposition(&q, &probes).unwrap().value;
        for (x, p) in probes.iter().zip(&r.psi) {
            assert!((p - x).amax() < 1e-14);
            assert!((radial_xi(&q, x).unwrap() - &q * x).amax() < 1e-14);
        }
        let c = DMatrix::identity(2, 2) * 2.5;
        let r = radial_decomposition(&c, &probes).unwrap().value;
        for (x, p) in probes.iter().zip(&r.psi) {
            assert!((p - x * 2.5).amax() < 1e-14);
            assert!((radial_xi(&c, x).unwrap() - x).amax() < 1e-14);
        }
        let m = DMatrix::from_row_slice(2, 2, &[1.2, -0.4, 0.9, 0.3]);
        assert!(radial_decomposition(&m, &probes).is_ok());
        assert!(radial_decomposition(&m, &[DVector::zeros(2)]).is_err());
    }
}
