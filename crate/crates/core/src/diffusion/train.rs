use super::process::forward_sample;
use super::schedule::DiffusionSchedule;
use crate::ctsim::CtSample;
use crate::dadiff::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numcore::{clip_grad_norm, warmup_cosine_lr, Adam, Bound, Rng, Tape, Var};
use crate::perception::{crop, PerceptionModel};

/// An LDCT/NDCT pair with the frozen perception embeddings of the full LDCT.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub size: usize,
    pub ldct: Vec<f64>,
    pub ndct: Vec<f64>,
    pub e_d: Vec<f64>,
    pub e_a: Vec<f64>,
}

/// Encodes every sample once with the frozen perception model.
pub fn prepare_items(perception: &PerceptionModel, data: &[CtSample]) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let size = chunk[0].size;
        if chunk.iter().any(|s| s.size != size) {
            return Err(Error::invalid("mixed image sizes"));
        }
        let refs: Vec<&[f64]> = chunk.iter().map(|s| s.ldct.as_slice()).collect();
        for (s, out) in chunk.iter().zip(perception.encode(&refs, size)?) {
            items.push(TrainItem { size, ldct: s.ldct.clone(), ndct: s.ndct.clone(), e_d: out.e_d, e_a: out.e_a });
        }
    }
    Ok(items)
}

/// Mean squared error between the true and predicted residual over a batch,
/// with one uniform `t ∈ {1..T}` and one noise field per item.
pub fn residual_loss<'t>(
    net: &Denoiser,
    p: &Bound<'t>,
    tape: &'t Tape,
    batch: &[TrainItem],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut total: Option<Var<'t>> = None;
    let mut count = 0;
    for item in batch {
        let res: Vec<f64> = item.ldct.iter().zip(&item.ndct).map(|(l, n)| l - n).collect();
        let t = 1 + rng.below(sched.steps);
        let eps = rng.normals(res.len());
        let i_t = forward_sample(&item.ndct, &res, t, &eps, sched);
        let pred = net.forward(p, tape, &i_t, &item.ldct, item.size, t, &item.e_d, &item.e_a)?;
        let target = tape.constant(vec![item.size, item.size], res)?;
        let diff = pred.sub(target)?;
        let sq = diff.mul(diff)?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(sq)?,
            None => sq,
        });
        count += item.size * item.size;
    }
    total.expect("nonempty batch").scale(1.0 / count as f64)
}

/// One residual-loss evaluation with embeddings from the frozen perception
/// model; gradients reach only the denoiser parameters bound in `p`.
pub fn training_step<'t>(
    net: &Denoiser,
    p: &Bound<'t>,
    tape: &'t Tape,
    perception: &PerceptionModel,
    batch: &[CtSample],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let items = prepare_items(perception, batch)?;
    residual_loss(net, p, tape, &items, sched, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub net: DenoiserConfig,
    pub steps: usize,
    pub eta: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Side of the random training patches; 0 trains on full images.
    pub patch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Iterations of linear learning-rate warmup before the cosine decay.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            net: DenoiserConfig::default(),
            steps: 100,
            eta: 0.2,
            iterations: 2000,
            batch: 2,
            patch: 32,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

fn random_patch(item: &TrainItem, side: usize, rng: &mut Rng) -> TrainItem {
    if side == 0 || side >= item.size {
        return item.clone();
    }
    let top = rng.below(item.size - side + 1);
    let left = rng.below(item.size - side + 1);
    TrainItem {
        size: side,
        ldct: crop(&item.ldct, item.size, top, left, side),
        ndct: crop(&item.ndct, item.size, top, left, side),
        e_d: item.e_d.clone(),
        e_a: item.e_a.clone(),
    }
}

/// Continues training `net` from iteration `start` to `cfg.iterations`,
/// returning the per-iteration losses.
///
/// The learning-rate schedule depends only on the absolute iteration, so a
/// run split at any point follows the same schedule.
pub fn train_denoiser(
    cfg: &DenoiserTrainConfig,
    net: &mut Denoiser,
    items: &[TrainItem],
    start: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let sched = DiffusionSchedule::new(cfg.steps, cfg.eta)?;
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations.saturating_sub(start));
    for it in start..cfg.iterations {
        let batch: Vec<TrainItem> = (0..cfg.batch.max(1))
            .map(|_| random_patch(&items[rng.below(items.len())], cfg.patch, rng))
            .collect();
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let loss = residual_loss(net, &p, &tape, &batch, &sched, rng).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step: it },
            e => e,
        })?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step: it });
        }
        tape.backward(loss)?;
        net.params.zero_grads();
        net.params.accumulate_grads(&tape, &p);
        clip_grad_norm(&mut net.params, cfg.clip_norm);
        opt.step(&mut net.params, warmup_cosine_lr(it, cfg.iterations, cfg.warmup, cfg.lr_max, cfg.lr_min));
        if net.params.tensors().iter().any(|t| t.values().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step: it });
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Mean residual loss over `items` with a fixed evaluation stream.
pub fn eval_loss(net: &Denoiser, items: &[TrainItem], sched: &DiffusionSchedule, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut sum = 0.0;
    for item in items {
        let tape = Tape::new();
        let p = net.params.bind_frozen(&tape);
        sum += residual_loss(net, &p, &tape, std::slice::from_ref(item), sched, &mut rng)?.item();
    }
    Ok(sum / items.len() as f64)
}
