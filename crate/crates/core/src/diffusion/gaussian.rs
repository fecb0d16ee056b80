//! Forward noising, Gaussian posteriors, learned-variance parameterization
//! and the training losses.
//!
//! Tensors carry the working precision `T`; all per-element arithmetic runs
//! in `f64` against the `f64` schedule and is cast back.

use crate::error::{dim_err, Error, Result};
use crate::nn::{NetOutput, NetOutputVars};
use crate::scalar::{normal_cdf, normal_pdf, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::schedule::DiffusionSchedule;

/// Weight of the bound term in the hybrid objective.
pub const HYBRID_LAMBDA: f64 = 0.001;

/// Half-width of one of the 256 intensity bins on `[-1, 1]`.
const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;
const EDGE: f64 = 0.999;
const PROB_FLOOR: f64 = 1e-12;

fn check_steps<T: Scalar>(x: &Tensor<T>, t: &[usize], sched: &DiffusionSchedule) -> Result<()> {
    if t.len() != x.shape().n {
        return dim_err(format!("{} timesteps for batch of {}", t.len(), x.shape().n));
    }
    if let Some(&bad) = t.iter().find(|&&s| s >= sched.num_steps()) {
        return Err(Error::Usage(format!(
            "timestep {bad} out of range for a {}-step schedule",
            sched.num_steps()
        )));
    }
    Ok(())
}

/// Applies `f(sample_step, a, b)` elementwise to two same-shape tensors.
fn per_sample_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    t: &[usize],
    f: impl Fn(usize, f64, f64) -> f64,
) -> Result<Tensor<T>> {
    b.expect_shape(a.shape(), "per-sample operand")?;
    let len = a.shape().sample_len();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| T::of(f(t[i / len], x.to_f64_lossy(), y.to_f64_lossy())))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Draws `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, one step per sample.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    check_steps(x0, t, sched)?;
    per_sample_zip(x0, eps, t, |s, x, e| {
        sched.alpha_bar[s].sqrt() * x + (1.0 - sched.alpha_bar[s]).sqrt() * e
    })
}

fn posterior_mean<T: Scalar>(
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    per_sample_zip(x0, xt, t, |s, a, b| {
        sched.posterior_mean_coef_x0[s] * a + sched.posterior_mean_coef_xt[s] * b
    })
}

/// Mean and variance of `q(x_{t−1} | x_t, x_0)`. The variance is one value
/// per sample.
pub fn posterior_mean_var<T: Scalar>(
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    sched: &DiffusionSchedule,
) -> Result<(Tensor<T>, Vec<f64>)> {
    check_steps(x0, t, sched)?;
    if t.contains(&0) {
        return Err(Error::Usage("posterior at t=0 has no previous step".into()));
    }
    let mean = posterior_mean(x0, xt, t, sched)?;
    Ok((mean, t.iter().map(|&s| sched.posterior_var[s]).collect()))
}

/// Fraction of the way from `log β̃_t` to `log β_t`: `(v+1)/2`, clamped so
/// the variance never leaves `[β̃_t, β_t]`.
pub fn variance_fraction(v: f64) -> f64 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// `d log Σ / d v` for the interpolation above (zero where the clamp holds).
fn log_var_slope(v: f64, sched: &DiffusionSchedule, s: usize) -> f64 {
    if (-1.0..=1.0).contains(&v) {
        0.5 * (sched.log_beta[s] - sched.log_posterior_var[s])
    } else {
        0.0
    }
}

fn model_log_var(v: f64, sched: &DiffusionSchedule, s: usize) -> f64 {
    let f = variance_fraction(v);
    f * sched.log_beta[s] + (1.0 - f) * sched.log_posterior_var[s]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeanVar<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
    pub pred_x0: Tensor<T>,
}

/// Reverse-step Gaussian implied by a network output: `x̂0` from the noise
/// prediction (optionally clipped to `[-1, 1]`), the posterior mean around
/// it, and the interpolated log-variance.
pub fn model_mean_var<T: Scalar>(
    eps: &Tensor<T>,
    v: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    sched: &DiffusionSchedule,
    clip_x0: bool,
) -> Result<ModelMeanVar<T>> {
    check_steps(xt, t, sched)?;
    v.expect_shape(xt.shape(), "variance output")?;
    let pred_x0 = per_sample_zip(xt, eps, t, |s, x, e| {
        let ab = sched.alpha_bar[s];
        let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
        if clip_x0 {
            x0.clamp(-1.0, 1.0)
        } else {
            x0
        }
    })?;
    let mean = posterior_mean(&pred_x0, xt, t, sched)?;
    let len = xt.shape().sample_len();
    let log_var = Tensor::from_vec(
        v.shape(),
        v.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| T::of(model_log_var(x.to_f64_lossy(), sched, t[i / len])))
            .collect(),
    )?;
    Ok(ModelMeanVar {
        mean,
        log_var,
        pred_x0,
    })
}

/// `KL(N(m1, e^lv1) ‖ N(m2, e^lv2))` in nats.
pub fn normal_kl(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    0.5 * (-1.0 + lv2 - lv1 + (lv1 - lv2).exp() + (m1 - m2).powi(2) * (-lv2).exp())
}

/// `∂ KL / ∂ lv2` for [`normal_kl`].
fn normal_kl_dlv2(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    0.5 * (1.0 - (lv1 - lv2).exp() - (m1 - m2).powi(2) * (-lv2).exp())
}

/// Log-likelihood of `x` (on the 256-level grid over `[-1, 1]`) under a
/// Gaussian discretized into bins, with the outer bins extended to ±∞.
/// Returns the value and its derivative in `log_scale`.
pub fn discretized_gaussian_log_likelihood(x: f64, mean: f64, log_scale: f64) -> (f64, f64) {
    let inv_std = (-log_scale).exp();
    let centered = x - mean;
    let plus = inv_std * (centered + BIN_HALF_WIDTH);
    let minus = inv_std * (centered - BIN_HALF_WIDTH);
    // each standardized edge u moves as du/dlog_scale = −u
    let d_cdf_plus = -normal_pdf(plus) * plus;
    let d_cdf_minus = -normal_pdf(minus) * minus;
    let floored = |p: f64, dp: f64| {
        if p > PROB_FLOOR {
            (p.ln(), dp / p)
        } else {
            (PROB_FLOOR.ln(), 0.0)
        }
    };
    if x < -EDGE {
        floored(normal_cdf(plus), d_cdf_plus)
    } else if x > EDGE {
        floored(normal_cdf(-minus), -d_cdf_minus)
    } else {
        let delta = if minus > 0.0 {
            // upper tail differences keep precision far from the mean
            normal_cdf(-minus) - normal_cdf(-plus)
        } else {
            normal_cdf(plus) - normal_cdf(minus)
        };
        floored(delta, d_cdf_plus - d_cdf_minus)
    }
}

/// Per-sample bound terms `L_t` (mean over elements, nats) and the gradient
/// of their batch mean with respect to `v`, holding the model mean fixed.
fn bound_terms<T: Scalar>(
    eps_pred: &Tensor<T>,
    v: &Tensor<T>,
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    sched: &DiffusionSchedule,
) -> Result<(Vec<f64>, Tensor<T>)> {
    let model = model_mean_var(eps_pred, v, xt, t, sched, false)?;
    let true_mean = posterior_mean(x0, xt, t, sched)?;
    let shape = xt.shape();
    let len = shape.sample_len();
    let scale = 1.0 / (len * shape.n) as f64;
    let mut terms = vec![0.0; shape.n];
    let mut grad = Vec::with_capacity(shape.numel());
    for i in 0..shape.numel() {
        let n = i / len;
        let s = t[n];
        let m = model.mean.data()[i].to_f64_lossy();
        let vv = v.data()[i].to_f64_lossy();
        let lv = model_log_var(vv, sched, s);
        let (term, d_lv) = if s == 0 {
            let (ll, d_ls) =
                discretized_gaussian_log_likelihood(x0.data()[i].to_f64_lossy(), m, 0.5 * lv);
            (-ll, -0.5 * d_ls)
        } else {
            let tm = true_mean.data()[i].to_f64_lossy();
            let tlv = sched.log_posterior_var[s];
            (normal_kl(tm, tlv, m, lv), normal_kl_dlv2(tm, tlv, m, lv))
        };
        terms[n] += term;
        grad.push(T::of(scale * d_lv * log_var_slope(vv, sched, s)));
    }
    for term in &mut terms {
        *term /= len as f64;
    }
    Ok((terms, Tensor::from_vec(shape, grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub l_simple: f64,
    /// Monte Carlo estimate of the full bound: `T · mean_batch(L_t)`.
    pub l_vlb: f64,
    pub l_hybrid: f64,
}

fn check_loss_inputs<T: Scalar>(
    eps_pred: &Tensor<T>,
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<()> {
    for (t, what) in [(eps_pred, "noise prediction"), (xt, "x_t"), (eps, "noise")] {
        t.expect_shape(x0.shape(), what)?;
    }
    Ok(())
}

/// The simple, bound and hybrid losses for plain tensors.
pub fn losses<T: Scalar>(
    out: &NetOutput<T>,
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Losses> {
    check_loss_inputs(&out.eps, x0, xt, eps)?;
    check_steps(x0, t, sched)?;
    let diff = out.eps.sub(eps)?;
    let l_simple = diff.sq_norm().to_f64_lossy() / diff.numel().max(1) as f64;
    let (terms, _) = bound_terms(&out.eps, &out.v, x0, xt, t, sched)?;
    let l_vlb = sched.num_steps() as f64 * terms.iter().sum::<f64>() / terms.len() as f64;
    Ok(Losses {
        l_simple,
        l_vlb,
        l_hybrid: l_simple + HYBRID_LAMBDA * l_vlb,
    })
}

/// Hybrid objective recorded on a tape. The bound reaches the parameters
/// only through `v`; the noise prediction sees it as a constant.
pub struct TrainingLoss {
    pub total: Var,
    pub l_simple: f64,
    pub l_vlb: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn training_losses<T: Scalar>(
    tape: &mut Tape<T>,
    out: NetOutputVars,
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
    lambda: f64,
) -> Result<TrainingLoss> {
    check_loss_inputs(tape.value(out.eps), x0, xt, eps)?;
    check_steps(x0, t, sched)?;
    let simple = tape.mse(out.eps, eps)?;
    let (terms, grad) = bound_terms(tape.value(out.eps), tape.value(out.v), x0, xt, t, sched)?;
    let steps = sched.num_steps() as f64;
    let l_vlb = steps * terms.iter().sum::<f64>() / terms.len() as f64;
    let vlb = tape.scalar_fn(out.v, T::of(l_vlb), grad.scale(T::of(steps)))?;
    let weighted = tape.scale(vlb, T::of(lambda));
    let total = tape.add(simple, weighted)?;
    Ok(TrainingLoss {
        total,
        l_simple: tape.value(simple).item()?.to_f64_lossy(),
        l_vlb,
    })
}
