use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of `x`.
///
/// The step actually taken is recomputed from the perturbed values so
/// rounding of `x ± eps` does not bias the quotient.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + eps;
        let minus = orig - eps;
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        let step = plus - minus;
        grad.data_mut()[i] = (fp - fm) / step ;
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = super::tensor::norm(a).max(super::tensor::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
