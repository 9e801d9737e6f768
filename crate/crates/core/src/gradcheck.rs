//! Central finite differences, used as an independent gradient oracle.

use crate::error::{Error, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
///
/// Evaluated in `f64` so the oracle is not limited by single-precision
/// rounding of the objective.
pub fn finite_diff_grad<F>(mut objective: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = objective(&x)?;
        x[i] = orig - h;
        let fm = objective(&x)?;
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite differences restricted to the listed coordinates.
pub fn finite_diff_at<F>(mut objective: F, point: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = objective(&x)?;
            x[i] = orig - h;
            let fm = objective(&x)?;
            x[i] = orig;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// `‖a − b‖₂ / ‖b‖₂`, or the absolute norm when `b` is zero.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|x| Ok(x[0] * x[0]), &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_sum_gives_ones() {
        let point = [0.5, -0.25, 1.75, 0.0];
        let g = finite_diff_grad(|x| Ok(x.iter().sum()), &point, 1.0 / 1024.0).unwrap();
        assert_eq!(g, vec![1.0; 4]);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(|x| Ok(x[0]), &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| Ok(x[0]), &[1.0], -1e-3).is_err());
    }

    #[test]
    fn relative_error() {
        assert_eq!(relative_l2_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_l2_error(&[2.0], &[1.0]) - 1.0).abs() < 1e-15);
    }
}
