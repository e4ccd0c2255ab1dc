use crate::error::{Error, Result};

/// Absolute floor used in the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central-difference gradient `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericDomain(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Central differences at `h`, `h/2` and `h/4` combined by Richardson
/// extrapolation, cancelling the `h^2` and `h^4` error terms. Far more
/// accurate than [`finite_diff_grad`] on smooth functions, at three times the
/// cost; the function must be smooth within `h` of `point`.
pub fn richardson_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let d1 = finite_diff_grad(&mut f, point, h)?;
    let d2 = finite_diff_grad(&mut f, point, h / 2.0)?;
    let d4 = finite_diff_grad(&mut f, point, h / 4.0)?;
    Ok(d1
        .iter()
        .zip(&d2)
        .zip(&d4)
        .map(|((a, b), c)| (64.0 * c - 20.0 * b + a) / 45.0)
        .collect())
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_is_flat() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_diff_grad(|x| x[0].exp(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn richardson_is_exact_on_quintics() {
        let f = |x: &[f64]| x[0].powi(5) - 3.0 * x[0].powi(3) + x[1];
        let g = richardson_grad(f, &[1.3, 0.0], 0.1).unwrap();
        let exact = 5.0 * 1.3f64.powi(4) - 9.0 * 1.3f64.powi(2);
        assert!((g[0] - exact).abs() < 1e-12, "{}", g[0] - exact);
        assert!((g[1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn non_finite_value_is_a_domain_error() {
        let err = finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NumericDomain(_)));
    }
}
