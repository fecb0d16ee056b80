//! Noise schedule, Gaussian diffusion losses and the sampler.

mod gaussian;
mod sampler;
mod schedule;

pub use gaussian::{
    discretized_gaussian_log_likelihood, losses, model_mean_var, normal_kl, posterior_mean_var,
    q_sample, training_losses, variance_fraction, Losses, ModelMeanVar, TrainingLoss,
    HYBRID_LAMBDA,
};
pub use sampler::{cfg_combine, p_sample_loop, Denoiser, GuidanceConfig, EVAL_CHUNK};
pub use schedule::{space_timesteps, BetaSchedule, DiffusionSchedule};
