use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{q_sample, training_losses, DiffusionSchedule, HYBRID_LAMBDA};
use crate::error::{config_err, Error, Result};
use crate::nn::{drop_labels, DiCo};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::data::{hflip_augment, ToyDataset};
use super::ema::{ema_update, EmaState};
use super::optim::{adamw_step, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub hflip_prob: f64,
    pub vlb_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            batch_size: 256,
            hflip_prob: 0.5,
            vlb_weight: HYBRID_LAMBDA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Optimizer step count after this update.
    pub step: u64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub grad_norm: f64,
}

/// One optimization step on a batch already in `[-1, 1]`: uniform `t`,
/// Gaussian noise, label dropout, hybrid loss, AdamW, then EMA.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut DiCo<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    sched: &DiffusionSchedule,
    opt: &mut OptimizerState<T>,
    ema: &mut EmaState<T>,
    vlb_weight: f64,
    rng: &mut R,
) -> Result<StepLosses> {
    let n = x0.shape().n;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.num_steps())).collect();
    let eps = Tensor::<T>::randn(x0.shape(), 1.0, rng);
    let xt = q_sample(x0, &t, &eps, sched)?;
    let cfg = &model.config;
    let y = drop_labels(labels, cfg.num_classes, cfg.label_dropout_prob, rng)?;

    let index = opt.step;
    let abort = |what: &str| Error::Numeric(format!("step {index}: {what}"));
    let mut tape = Tape::new();
    let p = model.params.load(&mut tape, true);
    let xv = tape.constant(xt.clone());
    let out = model.forward(&mut tape, &p, xv, &t, &y)?;
    let loss = training_losses(&mut tape, out, x0, &xt, &t, &eps, sched, vlb_weight)?;
    if !(loss.l_simple.is_finite() && loss.l_vlb.is_finite()) {
        return Err(abort(&format!(
            "non-finite loss (simple {}, vlb {})",
            loss.l_simple, loss.l_vlb
        )));
    }
    tape.backward(loss.total)?;
    let grads = model.params.grads(&mut tape, &p);
    drop(tape);
    let grad_norm = grads
        .iter()
        .map(|g| g.sq_norm().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(abort("non-finite gradient norm"));
    }
    adamw_step(&mut model.params, &grads, opt).map_err(|e| match e {
        Error::Numeric(m) => abort(&m),
        other => other,
    })?;
    ema_update(&model.params, ema)?;
    Ok(StepLosses {
        step: opt.step,
        l_simple: loss.l_simple,
        l_vlb: loss.l_vlb,
        grad_norm,
    })
}

/// Model, optimizer, EMA and the training stream, advanced one batch at a
/// time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: DiCo<T>,
    pub opt: OptimizerState<T>,
    pub ema: EmaState<T>,
    pub sched: DiffusionSchedule,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DiCo<T>, sched: DiffusionSchedule, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return config_err(format!("learning rate {} must be finite and nonnegative", config.lr));
        }
        let opt = OptimizerState::new(&model.params, config.lr, config.weight_decay);
        let ema = EmaState::new(&model.params, config.ema_decay)?;
        Ok(Self {
            model,
            opt,
            ema,
            sched,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws a batch with replacement, flips it, and takes one step.
    pub fn step(&mut self, data: &ToyDataset) -> Result<StepLosses> {
        if data.is_empty() {
            return config_err("training set is empty");
        }
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        let (x0, labels) = data.batch::<T>(&idx)?;
        let x0 = hflip_augment(&x0, &mut self.rng, self.config.hflip_prob);
        train_step(
            &mut self.model,
            &x0,
            &labels,
            &self.sched,
            &mut self.opt,
            &mut self.ema,
            self.config.vlb_weight,
            &mut self.rng,
        )
    }

    /// The model with EMA weights swapped in.
    pub fn ema_model(&self) -> DiCo<T> {
        let mut m = self.model.clone();
        m.params = self.ema.shadow.clone();
        m
    }
}
