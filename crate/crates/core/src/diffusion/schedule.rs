use std::str::FromStr;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaSchedule {
    Linear,
}

impl FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Self::Linear),
            other => config_err(format!("unknown beta schedule {other:?}")),
        }
    }
}

/// Noise schedule with every derived quantity precomputed in `f64`.
///
/// `timestep_map[i]` is the training timestep that step `i` corresponds to;
/// it is the identity for a base schedule and the kept indices for a
/// respaced one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prev: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub log_beta: Vec<f64>,
    /// `log β̃_t`, with step 0 (where `β̃_0 = 0`) taking step 1's value.
    pub log_posterior_var: Vec<f64>,
    pub posterior_mean_coef_x0: Vec<f64>,
    pub posterior_mean_coef_xt: Vec<f64>,
    pub timestep_map: Vec<usize>,
    /// Strictly increasing steps kept by the respaced sampler.
    pub respaced_indices: Vec<usize>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps`, with
    /// `num_respaced` evenly spaced sampling steps.
    pub fn new(
        kind: BetaSchedule,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        num_respaced: usize,
    ) -> Result<Self> {
        if steps < 2 {
            return config_err(format!("need at least 2 diffusion steps, got {steps}"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return config_err(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            ));
        }
        let betas = match kind {
            BetaSchedule::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let respaced = space_timesteps(steps, num_respaced)?;
        Self::from_betas(betas, (0..steps).collect(), respaced)
    }

    /// The default training schedule: 1000 linear steps from 1e-4 to 0.02.
    pub fn linear_default(num_respaced: usize) -> Result<Self> {
        Self::new(BetaSchedule::Linear, 1000, 1e-4, 0.02, num_respaced)
    }

    fn from_betas(
        betas: Vec<f64>,
        timestep_map: Vec<usize>,
        respaced_indices: Vec<usize>,
    ) -> Result<Self> {
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return config_err(format!("beta {b} outside (0, 1)"));
        }
        let n = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        let alpha_bar_prev: Vec<f64> = std::iter::once(1.0)
            .chain(alpha_bar[..n - 1].iter().copied())
            .collect();
        let posterior_var: Vec<f64> = (0..n)
            .map(|t| betas[t] * (1.0 - alpha_bar_prev[t]) / (1.0 - alpha_bar[t]))
            .collect();
        let log_posterior_var = (0..n)
            .map(|t| posterior_var[if t == 0 { 1 } else { t }].ln())
            .collect();
        let posterior_mean_coef_x0 = (0..n)
            .map(|t| betas[t] * alpha_bar_prev[t].sqrt() / (1.0 - alpha_bar[t]))
            .collect();
        let posterior_mean_coef_xt = (0..n)
            .map(|t| (1.0 - alpha_bar_prev[t]) * alphas[t].sqrt() / (1.0 - alpha_bar[t]))
            .collect();
        Ok(Self {
            log_beta: betas.iter().map(|b| b.ln()).collect(),
            betas,
            alphas,
            alpha_bar,
            alpha_bar_prev,
            posterior_var,
            log_posterior_var,
            posterior_mean_coef_x0,
            posterior_mean_coef_xt,
            timestep_map,
            respaced_indices,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// Sub-schedule over `respaced_indices`: betas are rederived so the kept
    /// steps reproduce the same cumulative `ᾱ`.
    pub fn respaced(&self) -> Result<Self> {
        let mut last = 1.0;
        let mut betas = Vec::with_capacity(self.respaced_indices.len());
        for &i in &self.respaced_indices {
            betas.push(1.0 - self.alpha_bar[i] / last);
            last = self.alpha_bar[i];
        }
        let map = self
            .respaced_indices
            .iter()
            .map(|&i| self.timestep_map[i])
            .collect();
        let k = self.respaced_indices.len();
        Self::from_betas(betas, map, (0..k).collect())
    }
}

/// `count` evenly spaced steps in `[0, steps)`, always including both ends.
pub fn space_timesteps(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count < 2 || count > steps {
        return config_err(format!(
            "respaced step count {count} must be in [2, {steps}]"
        ));
    }
    let stride = (steps - 1) as f64 / (count - 1) as f64;
    let out: Vec<usize> = (0..count).map(|i| (i as f64 * stride).round() as usize).collect();
    debug_assert!(out.windows(2).all(|w| w[0] < w[1]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = DiffusionSchedule::linear_default(250).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar[0], s.alphas[0]);
        for t in 1..1000 {
            assert!(s.posterior_var[t] <= s.betas[t]);
        }
        assert_eq!(s.respaced_indices.len(), 250);
        assert_eq!(s.respaced_indices[0], 0);
        assert_eq!(*s.respaced_indices.last().unwrap(), 999);
    }

    #[test]
    fn final_alpha_bar_matches_direct_product() {
        // direct product of (1 - beta_t) with betas recomputed independently
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let s = DiffusionSchedule::linear_default(250).unwrap();
        assert!((s.alpha_bar[999] - prod).abs() < 1e-15);
        // 40-digit reference: 4.035829765375683314817e-5
        assert!((s.alpha_bar[999] - 4.035_829_765_375_683e-5).abs() < 1e-17);
    }

    #[test]
    fn invalid_bounds() {
        assert!(DiffusionSchedule::new(BetaSchedule::Linear, 1000, 0.0, 0.02, 10).is_err());
        assert!(DiffusionSchedule::new(BetaSchedule::Linear, 1000, 0.03, 0.02, 10).is_err());
        assert!(DiffusionSchedule::new(BetaSchedule::Linear, 1000, 1e-4, 1.0, 10).is_err());
        assert!(DiffusionSchedule::new(BetaSchedule::Linear, 100, 1e-4, 0.02, 101).is_err());
    }

    #[test]
    fn full_respacing_reproduces_schedule() {
        let s = DiffusionSchedule::new(BetaSchedule::Linear, 200, 1e-4, 0.02, 200).unwrap();
        let r = s.respaced().unwrap();
        assert_eq!(r.timestep_map, (0..200).collect::<Vec<_>>());
        for t in 0..200 {
            assert!((r.betas[t] - s.betas[t]).abs() < 1e-12);
            assert!((r.alpha_bar[t] - s.alpha_bar[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn respaced_keeps_alpha_bar() {
        let s = DiffusionSchedule::linear_default(50).unwrap();
        let r = s.respaced().unwrap();
        for (i, &t) in r.timestep_map.iter().enumerate() {
            assert!((r.alpha_bar[i] - s.alpha_bar[t]).abs() < 1e-12);
        }
    }
}
