use crate::error::{config_err, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ParamStore<T>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    /// Starts the shadow at the current parameters.
    pub fn new(params: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return config_err(format!("ema decay {decay} outside [0, 1]"));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }
}

/// `shadow ← decay·shadow + (1−decay)·param`
pub fn ema_update<T: Scalar>(params: &ParamStore<T>, ema: &mut EmaState<T>) -> Result<()> {
    ema.shadow.check_layout(params)?;
    let d = T::of(ema.decay);
    let rest = T::of(1.0 - ema.decay);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get(id);
        for (s, &x) in ema.shadow.get_mut(id).data_mut().iter_mut().zip(p.data()) {
            *s = d * *s + rest * x;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::full(Shape::scalar(), x));
        p
    }

    #[test]
    fn geometric_sequence() {
        let mut ema = EmaState::new(&store(0.0), 0.9).unwrap();
        let p = store(1.0);
        ema_update(&p, &mut ema).unwrap();
        assert!((ema.shadow.iter().next().unwrap().1.data()[0] - 0.1).abs() < 1e-15);
        ema_update(&p, &mut ema).unwrap();
        assert!((ema.shadow.iter().next().unwrap().1.data()[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn unit_decay_freezes_shadow() {
        let mut ema = EmaState::new(&store(0.25), 1.0).unwrap();
        ema_update(&store(9.0), &mut ema).unwrap();
        assert_eq!(ema.shadow.iter().next().unwrap().1.data()[0], 0.25);
        assert!(EmaState::new(&store(0.0), 1.5).is_err());
    }
}
