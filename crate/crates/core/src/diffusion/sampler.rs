//! Respaced ancestral sampling with classifier-free guidance.

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::nn::{DiCo, NetOutput};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::gaussian::model_mean_var;
use super::schedule::DiffusionSchedule;

/// Largest batch one model call evaluates; bigger requests are chunked.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return config_err(format!("guidance scale {scale} is not finite"));
        }
        Ok(Self {
            scale,
            enabled: true,
        })
    }

    pub fn disabled() -> Self {
        Self {
            scale: 1.0,
            enabled: false,
        }
    }

    /// Scales below 1 are allowed for experiments but flagged.
    pub fn warning(&self) -> Option<String> {
        (self.enabled && self.scale < 1.0).then(|| {
            format!(
                "guidance scale {} < 1 interpolates toward the unconditional model",
                self.scale
            )
        })
    }
}

/// `uncond + s·(cond − uncond)`. At `s = 1` the conditional prediction is
/// returned unchanged.
pub fn cfg_combine<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if s == 1.0 {
        cond.expect_shape(uncond.shape(), "guidance")?;
        return Ok(cond.clone());
    }
    let s = T::of(s);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

/// Anything that predicts noise and variance coefficients.
pub trait Denoiser<T: Scalar> {
    fn in_channels(&self) -> usize;
    /// Label index meaning "no class".
    fn null_label(&self) -> usize;
    /// `t` holds training-schedule timesteps.
    fn denoise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<NetOutput<T>>;
}

impl<T: Scalar> Denoiser<T> for DiCo<T> {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn null_label(&self) -> usize {
        self.config.num_classes
    }

    fn denoise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<NetOutput<T>> {
        let n = x.shape().n;
        if n <= EVAL_CHUNK {
            return self.forward_eval(x, t, y);
        }
        let mut eps = Vec::new();
        let mut v = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(n - start);
            let out = self.forward_eval(
                &x.narrow_batch(start, len)?,
                &t[start..start + len],
                &y[start..start + len],
            )?;
            eps.push(out.eps);
            v.push(out.v);
        }
        Ok(NetOutput {
            eps: Tensor::cat_batch(&eps.iter().collect::<Vec<_>>())?,
            v: Tensor::cat_batch(&v.iter().collect::<Vec<_>>())?,
        })
    }
}

/// Ancestral sampling over `sched` (usually a respaced schedule whose
/// `timestep_map` points back into the training steps). Starts from
/// standard Gaussian noise and adds no noise on the final step.
pub fn p_sample_loop<T: Scalar, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: Shape,
    labels: &[usize],
    sched: &DiffusionSchedule,
    guidance: GuidanceConfig,
    clip_x0: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if labels.len() != shape.n {
        return dim_err(format!("{} labels for {} samples", labels.len(), shape.n));
    }
    if shape.c != model.in_channels() {
        return dim_err(format!(
            "sample shape {shape} does not match model input channels {}",
            model.in_channels()
        ));
    }
    let n = shape.n;
    let mut x = Tensor::<T>::randn(shape, 1.0, rng);
    for i in (0..sched.num_steps()).rev() {
        let steps = vec![i; n];
        let model_t = vec![sched.timestep_map[i]; n];
        let (eps, v) = if guidance.enabled {
            let both = Tensor::cat_batch(&[&x, &x])?;
            let t2 = [model_t.as_slice(), model_t.as_slice()].concat();
            let y2: Vec<usize> = labels
                .iter()
                .copied()
                .chain(std::iter::repeat_n(model.null_label(), n))
                .collect();
            let out = model.denoise(&both, &t2, &y2)?;
            let eps_c = out.eps.narrow_batch(0, n)?;
            let eps_u = out.eps.narrow_batch(n, n)?;
            (
                cfg_combine(&eps_c, &eps_u, guidance.scale)?,
                out.v.narrow_batch(0, n)?,
            )
        } else {
            let out = model.denoise(&x, &model_t, labels)?;
            (out.eps, out.v)
        };
        let step = model_mean_var(&eps, &v, &x, &steps, sched, clip_x0)?;
        x = if i > 0 {
            let noise = Tensor::<T>::randn(shape, 1.0, rng);
            let mut next = step.mean;
            for ((m, &lv), &z) in next
                .data_mut()
                .iter_mut()
                .zip(step.log_var.data())
                .zip(noise.data())
            {
                *m += (T::of(0.5) * lv).exp() * z;
            }
            next
        } else {
            step.mean
        };
        x.check_finite("sampler state")?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfg_arithmetic() {
        let c = Tensor::<f64>::full(Shape::scalar(), 0.8);
        let u = Tensor::full(Shape::scalar(), 0.5);
        assert!((cfg_combine(&c, &u, 2.0).unwrap().data()[0] - 1.1).abs() < 1e-15);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &u, 7.5).unwrap(), u);
    }

    #[test]
    fn low_scale_is_flagged() {
        assert!(GuidanceConfig::new(0.5).unwrap().warning().is_some());
        assert!(GuidanceConfig::new(1.0).unwrap().warning().is_none());
        assert!(GuidanceConfig::new(f64::NAN).is_err());
    }
}
