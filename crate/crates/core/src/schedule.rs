//! Noise schedule and the closed-form DDPM quantities built on it.
//!
//! Timesteps are 1-based (`1..=T`); index 0 is the clean-data convention
//! `alpha_bar(0) = 1`. Tables are kept in f64 and converted at use.

use serde::{Deserialize, Serialize};

use crate::error::{DissError, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters that fully determine a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    /// Linear schedule for a shortened chain: the default endpoints scaled
    /// by `1000 / steps`, so the chain still ends close to pure noise.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        ScheduleConfig {
            steps,
            beta_start: (DEFAULT_BETA_START * scale).min(0.999),
            beta_end: (DEFAULT_BETA_END * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Immutable schedule tables indexed by timestep.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    // all tables have length T + 1; index 0 holds the t = 0 convention
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
    // timestep the network sees for each entry; the identity unless respaced
    model_t: Vec<usize>,
}

/// Linear betas from `beta_start` to `beta_end`, both endpoints included.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(DissError::range("steps", format!("need at least 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DissError::range(
            "beta endpoints",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        ));
    }
    let mut betas = vec![0.0; steps + 1];
    for (i, b) in betas.iter_mut().enumerate().skip(1) {
        let frac = (i - 1) as f64 / (steps - 1) as f64;
        *b = beta_start + frac * (beta_end - beta_start);
    }
    let config = ScheduleConfig {
        steps,
        beta_start,
        beta_end,
    };
    Ok(NoiseSchedule::from_betas(config, betas, (0..=steps).collect()))
}

impl NoiseSchedule {
    fn from_betas(config: ScheduleConfig, betas: Vec<f64>, model_t: Vec<usize>) -> Self {
        let steps = betas.len() - 1;
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
        }
        let mut posterior_betas = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_betas[t] = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
        }
        NoiseSchedule {
            config,
            betas,
            alpha_bars,
            posterior_betas,
            model_t,
        }
    }

    /// Shorter chain over `steps` evenly spaced timesteps of this one.
    ///
    /// Keeps the cumulative products at the retained timesteps and derives
    /// per-step betas from their ratios. [`NoiseSchedule::model_timestep`]
    /// maps each new step back to the timestep the network was trained on.
    pub fn respaced(&self, steps: usize) -> Result<NoiseSchedule> {
        let full = self.steps();
        if steps < 2 || steps > full {
            return Err(DissError::range("steps", format!("respacing needs 2..={full}, got {steps}")));
        }
        if steps == full {
            return Ok(self.clone());
        }
        let mut keep = vec![0usize];
        for i in 0..steps {
            // evenly spaced, always including T
            let t = 1 + ((i as f64) * (full - 1) as f64 / (steps - 1) as f64).round() as usize;
            keep.push(t);
        }
        let mut betas = vec![0.0; steps + 1];
        for i in 1..=steps {
            betas[i] = 1.0 - self.alpha_bars[keep[i]] / self.alpha_bars[keep[i - 1]];
        }
        let model_t = keep.iter().map(|&t| self.model_t[t]).collect();
        Ok(NoiseSchedule::from_betas(self.config, betas, model_t))
    }

    /// Parameters of the linear schedule this one was built from.
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// Timestep index to feed the network at chain step `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_t[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DissError::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of q(x_{t-1} | x_t, x_0); zero at t = 1.
    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t]
    }

    /// log of the posterior variance with the t = 1 entry replaced by t = 2.
    pub fn posterior_log_beta_clipped(&self, t: usize) -> f64 {
        if t == 1 {
            self.posterior_betas[2].ln()
        } else {
            self.posterior_betas[t].ln()
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// Coefficients `(a, b)` of the mean of q(x_{t-1} | x_t, x_0) = a·x_0 + b·x_t.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let beta = self.betas[t];
        let a = ab_prev.sqrt() * beta / (1.0 - ab);
        let b = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (a, b)
    }
}

/// One forward transition `sqrt(1 - beta_t)·x_{t-1} + sqrt(beta_t)·eps`.
pub fn q_step<T: Scalar>(x_prev: &Image<T>, t: usize, eps: &Image<T>, sched: &NoiseSchedule) -> Result<Image<T>> {
    sched.check_t(t)?;
    x_prev.ensure_same_shape(eps, "q_step noise")?;
    let a = T::from_f64_lossy(sched.alpha(t).sqrt());
    let b = T::from_f64_lossy(sched.beta(t).sqrt());
    Ok(x_prev.zip_map(eps, |x, e| a * x + b * e))
}

/// Forward marginal: `sqrt(ab_t)·x0 + sqrt(1 - ab_t)·eps`.
pub fn q_sample<T: Scalar>(x0: &Image<T>, t: usize, eps: &Image<T>, sched: &NoiseSchedule) -> Result<Image<T>> {
    sched.check_t(t)?;
    x0.ensure_same_shape(eps, "q_sample noise")?;
    Ok(q_sample_unchecked(x0, sched.alpha_bar(t), eps))
}

pub(crate) fn q_sample_unchecked<T: Scalar>(x0: &Image<T>, alpha_bar: f64, eps: &Image<T>) -> Image<T> {
    let a = T::from_f64_lossy(alpha_bar.sqrt());
    let b = T::from_f64_lossy((1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean of the true posterior q(x_{t-1} | x_t, x_0).
pub fn q_posterior_mean<T: Scalar>(x0: &Image<T>, x_t: &Image<T>, t: usize, sched: &NoiseSchedule) -> Result<Image<T>> {
    sched.check_t(t)?;
    x0.ensure_same_shape(x_t, "q_posterior_mean")?;
    let (a, b) = sched.posterior_mean_coefficients(t);
    let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
    Ok(x0.zip_map(x_t, |x0, xt| a * x0 + b * xt))
}

/// Reverse-process mean from a noise prediction:
/// `(x_t - beta_t / sqrt(1 - ab_t) · eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean_from_eps<T: Scalar>(
    x_t: &Image<T>,
    eps_hat: &Image<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image<T>> {
    sched.check_t(t)?;
    x_t.ensure_same_shape(eps_hat, "posterior_mean_from_eps")?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let c1 = T::from_f64_lossy(inv_sqrt_alpha);
    let c2 = T::from_f64_lossy(inv_sqrt_alpha * eps_coef);
    Ok(x_t.zip_map(eps_hat, |x, e| c1 * x - c2 * e))
}

/// Maps a raw network output to the interpolation weight in `[0, 1]`.
pub fn variance_weight<T: Scalar>(v: T) -> T {
    let half = T::from_f64_lossy(0.5);
    ((v + T::one()) * half).max(T::zero()).min(T::one())
}

/// Learned variance: log-space interpolation between `beta_t` (weight 1) and
/// the posterior variance (weight 0).
pub fn model_variance<T: Scalar>(v: &Image<T>, t: usize, sched: &NoiseSchedule) -> Result<Image<T>> {
    sched.check_t(t)?;
    let log_hi = T::from_f64_lossy(sched.beta(t).ln());
    let log_lo = T::from_f64_lossy(sched.posterior_log_beta_clipped(t));
    Ok(v.map(|raw| {
        let w = variance_weight(raw);
        (w * log_hi + (T::one() - w) * log_lo).exp()
    }))
}

/// One reverse transition `mu + sqrt(sigma_sq)·noise`; deterministic at t = 1.
pub fn ddpm_step<T: Scalar>(mu: &Image<T>, sigma_sq: &Image<T>, t: usize, noise: &Image<T>) -> Result<Image<T>> {
    mu.ensure_same_shape(sigma_sq, "ddpm_step variance")?;
    mu.ensure_same_shape(noise, "ddpm_step noise")?;
    if t == 0 {
        return Err(DissError::TimestepOutOfRange {
            t,
            min: 1,
            max: usize::MAX,
        });
    }
    if t == 1 {
        return Ok(mu.clone());
    }
    let mut out = mu.clone();
    for ((o, &s), &z) in out.data_mut().iter_mut().zip(sigma_sq.data()).zip(noise.data()) {
        *o += s.sqrt() * z;
    }
    Ok(out)
}
