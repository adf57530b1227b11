//! Empirical convergence orders from error ladders.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    /// Least-squares slope of `log(err)` against `log(h)`.
    pub order: f64,
    pub intercept: f64,
    /// Slopes between consecutive rungs.
    pub pairwise: Vec<f64>,
}

/// Fits `err ≈ C h^order`. Needs at least two rungs with positive errors.
pub fn fit_order(steps: &[f64], errors: &[f64]) -> Result<OrderFit> {
    if steps.len() != errors.len() || steps.len() < 2 {
        return Err(Error::InvalidParameter("need at least two matching rungs".into()));
    }
    if steps.iter().chain(errors).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter("steps and errors must be positive and finite".into()));
    }
    let xs: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("steps must not all be equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let order = sxy / sxx;
    let pairwise = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    Ok(OrderFit { order, intercept: my - order * mx, pairwise })
}

/// `h0, h0/2, .., h0/2^(rungs-1)`.
pub fn dyadic_ladder(h0: f64, rungs: usize) -> Vec<f64> {
    (0..rungs).map(|r| h0 / 2f64.powi(r as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_power_law() {
        let hs = dyadic_ladder(0.1, 5);
        let errs: Vec<f64> = hs.iter().map(|h| 3.0 * h * h).collect();
        let fit = fit_order(&hs, &errs).unwrap();
        assert!((fit.order - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.pairwise.iter().all(|p| (p - 2.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(fit_order(&[0.1], &[1.0]).is_err());
        assert!(fit_order(&[0.1, 0.05], &[1.0, 0.0]).is_err());
        assert!(fit_order(&[0.1, 0.1], &[1.0, 0.5]).is_err());
    }
}
