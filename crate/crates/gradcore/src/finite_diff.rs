use crate::element::Real;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Independent of the tape; this is the oracle that backward passes are
/// checked against.
pub fn finite_diff_grad<E: Real, F>(mut f: F, x: &Tensor<E>, h: E) -> Result<Tensor<E>>
where
    F: FnMut(&Tensor<E>) -> Result<E>,
{
    if !(h > E::zero()) {
        return Err(TensorError::Contract("finite difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((up - down) / two_h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative L∞ error `max|a−b| / max(max|b|, floor)`.
pub fn relative_linf<E: Real>(actual: &Tensor<E>, expected: &Tensor<E>, floor: f64) -> f64 {
    let diff = actual
        .data()
        .iter()
        .zip(expected.data())
        .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
        .fold(0.0, f64::max);
    diff / expected.max_abs().to_f64_lossy().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::l1_mean;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn l1_mean_against_zero() {
        let x = Tensor::<f64>::from_f64(&[2], &[2.0, -2.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let g = finite_diff_grad(|t| l1_mean(t, &zero), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-9);
        assert!((g.data()[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::<f64>::scalar(1.0);
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
