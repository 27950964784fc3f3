use crate::error::{Error, Result};

/// Residual diffusion schedule with `ᾱ_t = t/T` and `β̄_t = η·ᾱ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub eta: f64,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("eta {eta} must be finite and non-negative")));
        }
        let alpha_bar: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        let beta_bar = alpha_bar.iter().map(|a| eta * a).collect();
        Ok(Self { steps, eta, alpha_bar, beta_bar })
    }

    /// Per-step noise variance `β̄_t² − β̄_{t−1}²` for `t ≥ 1`.
    pub fn beta_sq(&self, t: usize) -> f64 {
        self.beta_bar[t].powi(2) - self.beta_bar[t - 1].powi(2)
    }

    /// Per-step residual increment `ᾱ_t − ᾱ_{t−1}`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] - self.alpha_bar[t - 1]
    }
}

/// Decreasing timesteps from `T` to `0` used by the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    pub timesteps: Vec<usize>,
    pub stochastic_init: bool,
}

impl SamplerPlan {
    /// `steps` uniformly spaced jumps from `T` down to `0`.
    pub fn uniform(total: usize, steps: usize, stochastic_init: bool) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("cannot take {steps} sampling steps over {total}")));
        }
        let timesteps = (0..=steps)
            .rev()
            .map(|k| (k as f64 * total as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self { timesteps, stochastic_init })
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        let ok = self.timesteps.len() >= 2
            && self.timesteps[0] == total
            && *self.timesteps.last().unwrap() == 0
            && self.timesteps.windows(2).all(|w| w[0] > w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("timesteps {:?} must decrease strictly from {total} to 0", self.timesteps)))
        }
    }
}
