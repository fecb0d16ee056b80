use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyperparameters plus the moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments shaped like `params`, with betas (0.9, 0.999) and
    /// eps 1e-8.
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    fn check_layout(&self, params: &ParamStore<T>) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| m.shape() == p.shape() && v.shape() == p.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("optimizer moments do not mirror the parameters".into()))
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    state.check_layout(params)?;
    if grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        g.expect_shape(params.get(id).shape(), params.name(id))?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                params.name(id)
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    let decay = T::of(1.0 - state.lr * state.weight_decay);

    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let it = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            .zip(grads[k].data());
        for ((p, (m, v)), &g) in it {
            *p *= decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn single(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::full(Shape::scalar(), w));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut s = OptimizerState::new(&p, 1e-2, 0.0);
        adamw_step(&mut p, &[Tensor::zeros(Shape::scalar())], &mut s).unwrap();
        assert_eq!(p.iter().next().unwrap().1.data()[0], 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_sign_step() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p, 1e-3, 0.0);
        adamw_step(&mut p, &[Tensor::full(Shape::scalar(), -4.0)], &mut s).unwrap();
        let w = p.iter().next().unwrap().1.data()[0];
        assert!((w - 1e-3).abs() < 1e-11, "{w}");
    }

    #[test]
    fn quadratic_bowl() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, 1e-2, 0.0);
        for _ in 0..200 {
            let w = p.iter().next().unwrap().1.data()[0];
            adamw_step(&mut p, &[Tensor::full(Shape::scalar(), 2.0 * w)], &mut s).unwrap();
        }
        assert!(p.iter().next().unwrap().1.data()[0].abs() < 0.1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p, 1e-2, 0.0);
        let err = adamw_step(&mut p, &[Tensor::full(Shape::scalar(), f64::NAN)], &mut s)
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("parameter w")), "{err}");
        assert_eq!(s.step, 0);
    }
}
