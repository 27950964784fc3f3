use std::cell::Cell;

use super::process::{ddim_step, estimate_noise};
use super::schedule::{DiffusionSchedule, SamplerPlan};
use crate::dadiff::Denoiser;
use crate::error::Result;
use crate::numcore::Rng;

/// Anything that predicts the residual `I_ld − I_nd` from `(I_t, I_ld, t)`.
pub trait ResidualPredictor {
    fn predict_residual(&self, i_t: &[f64], i_ld: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// The trained network with fixed conditioning embeddings.
pub struct NetPredictor<'a> {
    pub net: &'a Denoiser,
    pub size: usize,
    pub e_d: &'a [f64],
    pub e_a: &'a [f64],
}

impl ResidualPredictor for NetPredictor<'_> {
    fn predict_residual(&self, i_t: &[f64], i_ld: &[f64], t: usize) -> Result<Vec<f64>> {
        self.net.predict(i_t, i_ld, self.size, t, self.e_d, self.e_a)
    }
}

/// Returns a fixed residual and counts how often it was asked.
pub struct OraclePredictor {
    pub residual: Vec<f64>,
    pub calls: Cell<usize>,
}

impl OraclePredictor {
    pub fn new(residual: Vec<f64>) -> Self {
        Self { residual, calls: Cell::new(0) }
    }
}

impl ResidualPredictor for OraclePredictor {
    fn predict_residual(&self, _i_t: &[f64], _i_ld: &[f64], _t: usize) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        Ok(self.residual.clone())
    }
}

/// Runs the reverse process without the final clamp.
pub fn sample_unclamped(
    predictor: &dyn ResidualPredictor,
    i_ld: &[f64],
    plan: &SamplerPlan,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    plan.validate(sched.steps)?;
    let b_t = sched.beta_bar[sched.steps];
    let mut x: Vec<f64> = if plan.stochastic_init {
        i_ld.iter().map(|l| l + b_t * rng.normal()).collect()
    } else {
        i_ld.to_vec()
    };
    for w in plan.timesteps.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let r = predictor.predict_residual(&x, i_ld, t)?;
        let eps = if sched.beta_bar[t] > 0.0 {
            Some(estimate_noise(&x, i_ld, &r, t, sched)?)
        } else {
            None
        };
        x = ddim_step(&x, t, t_next, &r, eps.as_deref(), sched, i_ld)?;
    }
    Ok(x)
}

/// Reverse process from `I_T` to `I_0`, clamped to `[0, 1]`.
pub fn sample(
    predictor: &dyn ResidualPredictor,
    i_ld: &[f64],
    plan: &SamplerPlan,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    Ok(sample_unclamped(predictor, i_ld, plan, sched, rng)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}
