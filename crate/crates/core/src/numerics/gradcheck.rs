//! Central finite differences, the independent reference for every
//! reverse-mode rule.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = central_difference(&mut f, &mut probe, i, eps)?;
    }
    Ok(grad)
}

/// Central difference for a subset of coordinates of `x`.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor<f64>, coords: &[usize], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    coords.iter().map(|&i| central_difference(&mut f, &mut probe, i, eps)).collect()
}

fn central_difference<F>(f: &mut F, probe: &mut Tensor<f64>, i: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let plus = f(probe)?;
    probe.data_mut()[i] = orig - eps;
    let minus = f(probe)?;
    probe.data_mut()[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!("objective at coordinate {i}")));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, or the absolute difference when both
/// norms are below `1e-10`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1e3]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::scalar(0.0);
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0].abs()), &x, 0.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }
}
