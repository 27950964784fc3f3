//! Residual diffusion between the normal-dose image and its low-dose
//! counterpart, the residual training objective, and a few-step
//! deterministic sampler.

mod process;
mod sampler;
mod schedule;
mod train;

pub use process::{ddim_step, estimate_noise, forward_sample};
pub use sampler::{sample, sample_unclamped, NetPredictor, OraclePredictor, ResidualPredictor};
pub use schedule::{DiffusionSchedule, SamplerPlan};
pub use train::{
    eval_loss, prepare_items, residual_loss, train_denoiser, training_step, DenoiserTrainConfig, TrainItem,
};

use crate::dadiff::Denoiser;
use crate::error::Result;
use crate::numcore::Rng;

/// Denoises one LDCT image given its perception embeddings.
pub fn denoise(
    net: &Denoiser,
    ldct: &[f64],
    size: usize,
    e_d: &[f64],
    e_a: &[f64],
    plan: &SamplerPlan,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let predictor = NetPredictor { net, size, e_d, e_a };
    sample(&predictor, ldct, plan, sched, rng)
}
