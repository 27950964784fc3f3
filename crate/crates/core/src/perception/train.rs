use std::fmt::Write as _;

use super::losses::{loss_anatomy, loss_dose, loss_rank};
use super::model::{PerceptionDims, PerceptionModel, PerceptionOutput};
use crate::ctsim::CtSample;
use crate::error::{Error, Result};
use crate::metrics::{plcc, srocc};
use crate::numcore::{clip_grad_norm, cosine_lr, Adam, Bound, ParamStore, Rng, Sgd, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}`"))),
        }
    }
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &PerceptionTrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.momentum, cfg.weight_decay)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.momentum, 0.999, cfg.weight_decay)),
        }
    }

    fn step(&mut self, params: &mut ParamStore, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Adam(o) => o.step(params, lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionTrainConfig {
    pub dims: PerceptionDims,
    pub tau: f64,
    /// Source images per batch; each contributes two crops.
    pub batch_images: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr_max: f64,
    pub lr_min: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the image area kept by each random crop.
    pub crop_area: f64,
    /// Global gradient-norm clip applied before each step.
    pub clip_norm: f64,
}

impl Default for PerceptionTrainConfig {
    fn default() -> Self {
        Self {
            dims: PerceptionDims::default(),
            tau: 0.1,
            batch_images: 16,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            lr_max: 1e-3,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 0.0,
            crop_area: 0.75,
            clip_norm: 1.0,
        }
    }
}

/// Per-epoch means of the total loss and of its (dose, rank, anatomy) terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub total: Vec<f64>,
    pub parts: Vec<[f64; 3]>,
}

/// Square `side × side` window at (`top`, `left`) of a `size × size` image.
pub fn crop(img: &[f64], size: usize, top: usize, left: usize, side: usize) -> Vec<f64> {
    assert!(top + side <= size && left + side <= size, "crop out of bounds");
    (0..side)
        .flat_map(|i| img[(top + i) * size + left..(top + i) * size + left + side].iter().copied())
        .collect()
}

/// Dose MSE plus ranking loss plus anatomy loss, unweighted.
pub fn loss_total<'t>(
    model: &PerceptionModel,
    p: &Bound<'t>,
    tape: &'t Tape,
    views: &[&[f64]],
    side: usize,
    doses: &[f64],
    anatomies: &[usize],
    tau: f64,
) -> Result<(Var<'t>, [f64; 3])> {
    let out = model.forward(p, tape, views, side)?;
    let l_dose = loss_dose(out.y_hat, doses)?;
    let l_rank = loss_rank(out.e_d, doses, tau)?;
    let l_anat = loss_anatomy(out.e_a, anatomies, tau)?;
    let parts = [l_dose.item(), l_rank.item(), l_anat.item()];
    Ok((l_dose.add(l_rank)?.add(l_anat)?, parts))
}

fn check_coverage(data: &[CtSample]) -> Result<()> {
    let mut doses: Vec<f64> = data.iter().map(|s| s.dose).collect();
    doses.sort_by(f64::total_cmp);
    doses.dedup();
    let mut anat: Vec<_> = data.iter().map(|s| s.anatomy).collect();
    anat.sort();
    anat.dedup();
    if doses.len() < 2 || anat.len() < 2 {
        return Err(Error::invalid("perception training needs at least two doses and two anatomies"));
    }
    Ok(())
}

/// Trains a fresh model (cosine learning-rate schedule) on two random crops
/// per image.
pub fn train_perception(cfg: &PerceptionTrainConfig, data: &[CtSample], rng: &mut Rng) -> Result<(PerceptionModel, TrainTrace)> {
    check_coverage(data)?;
    let size = data[0].size;
    if data.iter().any(|s| s.size != size) {
        return Err(Error::invalid("mixed image sizes"));
    }
    let side = ((size * size) as f64 * cfg.crop_area).sqrt().floor() as usize;
    let side = side.clamp(16.min(size), size);
    let mut model = PerceptionModel::new(cfg.dims.clone(), rng);
    let mut opt = Optimizer::new(cfg);
    let batch = cfg.batch_images.max(2).min(data.len());
    let per_epoch = data.len() / batch;
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_parts = [0.0; 3];
        for chunk in order.chunks_exact(batch) {
            let mut views = Vec::with_capacity(2 * batch);
            let mut doses = Vec::with_capacity(2 * batch);
            let mut anat = Vec::with_capacity(2 * batch);
            for &i in chunk {
                for _ in 0..2 {
                    let top = rng.below(size - side + 1);
                    let left = rng.below(size - side + 1);
                    views.push(crop(&data[i].ldct, size, top, left, side));
                    doses.push(data[i].dose);
                    anat.push(data[i].anatomy.index());
                }
            }
            let refs: Vec<&[f64]> = views.iter().map(Vec::as_slice).collect();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let (loss, parts) = loss_total(&model, &p, &tape, &refs, side, &doses, &anat, cfg.tau)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { step: epoch },
                    e => e,
                })?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch });
            }
            tape.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&tape, &p);
            clip_grad_norm(&mut model.params, cfg.clip_norm);
            opt.step(&mut model.params, cosine_lr(step, total, cfg.lr_max, cfg.lr_min));
            step += 1;
            epoch_loss += value;
            epoch_parts.iter_mut().zip(parts).for_each(|(a, b)| *a += b);
        }
        let n = per_epoch.max(1) as f64;
        trace.total.push(epoch_loss / n);
        trace.parts.push(epoch_parts.map(|v| v / n));
    }
    Ok((model, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionEval {
    pub plcc: f64,
    pub srocc: f64,
    pub anatomy_acc: f64,
}

fn encode_all(model: &PerceptionModel, data: &[CtSample]) -> Result<Vec<PerceptionOutput>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let imgs: Vec<&[f64]> = chunk.iter().map(|s| s.ldct.as_slice()).collect();
        out.extend(model.encode(&imgs, chunk[0].size)?);
    }
    Ok(out)
}

/// Score correlations against the true dose fractions, and nearest
/// class-centroid accuracy of the anatomy embeddings (centroids taken over
/// `data` itself).
pub fn eval_perception(model: &PerceptionModel, data: &[CtSample]) -> Result<PerceptionEval> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let outs = encode_all(model, data)?;
    let y_hat: Vec<f64> = outs.iter().map(|o| o.y_hat).collect();
    let y_d: Vec<f64> = data.iter().map(|s| s.dose).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.anatomy.index()).collect();
    let e_a: Vec<&[f64]> = outs.iter().map(|o| o.e_a.as_slice()).collect();
    Ok(PerceptionEval {
        plcc: plcc(&y_hat, &y_d)?,
        srocc: srocc(&y_hat, &y_d)?,
        anatomy_acc: centroid_accuracy(&e_a, &labels),
    })
}

pub(crate) fn centroid_accuracy(emb: &[&[f64]], labels: &[usize]) -> f64 {
    let d = emb[0].len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (e, &l) in emb.iter().zip(labels) {
        centroids[l].iter_mut().zip(e.iter()).for_each(|(c, v)| *c += v);
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let correct = emb
        .iter()
        .zip(labels)
        .filter(|(e, &l)| {
            let dist = |c: &[f64]| c.iter().zip(e.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == l
        })
        .count();
    correct as f64 / emb.len() as f64
}

/// CSV of per-sample embeddings: `sample_id,y_d,anatomy,e_d0..,e_a0..`.
pub fn embeddings_csv(model: &PerceptionModel, data: &[CtSample]) -> Result<String> {
    let outs = encode_all(model, data)?;
    let d = model.dims.embed_dim;
    let mut s = String::from("sample_id,y_d,anatomy");
    for i in 0..d {
        let _ = write!(s, ",e_d{i}");
    }
    for i in 0..d {
        let _ = write!(s, ",e_a{i}");
    }
    s.push('\n');
    for (i, (o, smp)) in outs.iter().zip(data).enumerate() {
        let _ = write!(s, "{i},{},{}", smp.dose, smp.anatomy);
        for v in o.e_d.iter().chain(&o.e_a) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_centroids_are_exact() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(centroid_accuracy(&[&a, &b], &[0, 1]), 1.0);
    }

    #[test]
    fn crop_window() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(crop(&img, 4, 1, 2, 2), vec![6.0, 7.0, 10.0, 11.0]);
    }
}
