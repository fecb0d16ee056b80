//! Central finite differences, the reference for every analytic gradient.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + δe_i) − f(x − δe_i)) / 2δ` for every coordinate `i`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    step: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (step + step);
    }
    grad
}

/// Finite differences for a subset of coordinates only.
pub fn finite_diff_coords<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    coords: &[usize],
    step: T,
) -> Vec<T> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (step + step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let mut diff = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.max(nb).sqrt();
    if denom == T::zero() {
        T::zero()
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c + h * w) as f64);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_one() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 4), 1.0);
        let g = finite_diff_grad(|t| t.sq_norm(), &x, 1e-3);
        assert!(g.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0f64; 3], &[0.0; 3]), 0.0);
        assert!((relative_error(&[1.0f64, 0.0], &[1.0, 0.1]) - 0.1 / 1.01f64.sqrt()).abs() < 1e-12);
    }
}
