//! Self-checks runnable from the command line: gradient checks of every
//! primitive and network block, the scan and contrastive-loss oracles, the
//! projector and reconstruction oracles, and sampler exactness.

use std::rc::Rc;
use std::time::Instant;

use crate::ctsim::{
    fbp, make_phantom, pixel_x, pixel_y, project_analytic, project_numeric, rasterize, Anatomy, Ellipse, EllipsePhantom,
    ScanGeometry,
};
use crate::dadiff::{Condition, Cssm, Dacb, DacbDims, DacbVariant, Denoiser, DenoiserConfig, InitMode, Rleb, TransposedAttention};
use crate::diffusion::{forward_sample, residual_loss, sample_unclamped, DiffusionSchedule, OraclePredictor, SamplerPlan, TrainItem};
use crate::error::Result;
use crate::metrics::psnr;
use crate::numcore::{
    concat, grad_check, grad_check_sampled, selective_scan, Bound, OpKind, ParamStore, Rng, ScanInputs, Tape, Tensor, Var,
    DEFAULT_EPS,
};
use crate::perception::{loss_anatomy, loss_rank};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteResult {
    /// One report line, e.g. `PASS op:exp max_err=1.2e-10 tol=1e-6 (0.01s)`.
    pub fn line(&self) -> String {
        format!(
            "{} {} max_err={:.3e} tol={:.0e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.seconds
        )
    }
}

/// Errors are reported as an infinite error so the suite fails without
/// aborting the run.
fn run(name: impl Into<String>, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> SuiteResult {
    let start = Instant::now();
    let max_error = f().unwrap_or(f64::INFINITY);
    SuiteResult {
        name: name.into(),
        max_error,
        tolerance,
        passed: max_error < tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Weighted sum with fixed random weights, so every output element reaches
/// the loss with a distinct coefficient.
fn reduce<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let n = out.numel();
    let w = Rng::new(seed).normals(n);
    out.mul(tape.constant(out.shape(), w)?)?.sum()
}

/// Largest gradient-check error of `kind` over `instances` random cases.
pub fn op_gradcheck(kind: OpKind, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..instances as u64 {
        let mut rng = Rng::substream(seed, case);
        let ws = rng.next_u64();
        let (r, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5));
        let err = match kind {
            OpKind::MatMul => {
                let k = dim(&mut rng, 1, 4);
                let ins = [randn(&[r, k], &mut rng), randn(&[k, c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].matmul(v[1])?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::Conv2d3x3Pad1 => {
                let (ci, co, h, w) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 2), dim(&mut rng, 2, 5), dim(&mut rng, 2, 5));
                let stride = 1 + rng.below(2);
                let ins = [randn(&[ci, h, w], &mut rng), randn(&[co, ci, 3, 3], &mut rng), randn(&[co], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].conv2d(v[1], Some(v[2]), stride)?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::PointwiseConv => {
                let (ci, co, h, w) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
                let ins = [randn(&[ci, h, w], &mut rng), randn(&[co, ci], &mut rng), randn(&[co], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].pointwise_conv(v[1], Some(v[2]))?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::LayerNorm => {
                let c = c.max(3);
                let ins = [randn(&[r, c], &mut rng), randn(&[c], &mut rng), randn(&[c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5)?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::SoftmaxLastDim => {
                let ins = [randn(&[r, c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].softmax_last_dim()?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::Softplus | OpKind::Exp | OpKind::Silu => {
                let ins = [randn(&[r, c], &mut rng)];
                grad_check(
                    |t, v| {
                        let out = match kind {
                            OpKind::Softplus => v[0].softplus()?,
                            OpKind::Exp => v[0].exp()?,
                            _ => v[0].silu()?,
                        };
                        reduce(t, out, ws)
                    },
                    &ins,
                    DEFAULT_EPS,
                )?
            }
            OpKind::Log => {
                let x = Tensor::from_fn([r, c], |_| rng.uniform_in(0.5, 2.0));
                grad_check(|t, v| reduce(t, v[0].log()?, ws), &[x], DEFAULT_EPS)?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let ins = [randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)];
                grad_check(
                    |t, v| {
                        let out = match kind {
                            OpKind::Add => v[0].add(v[1])?,
                            OpKind::Sub => v[0].sub(v[1])?,
                            _ => v[0].mul(v[1])?,
                        };
                        reduce(t, out, ws)
                    },
                    &ins,
                    DEFAULT_EPS,
                )?
            }
            OpKind::ScalarScale => {
                let ins = [randn(&[r, c], &mut rng), randn(&[1], &mut rng)];
                let k = rng.normal();
                grad_check(|t, v| reduce(t, v[0].scale(k)?.scale_by(v[1])?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::ChannelBias | OpKind::ChannelScale => {
                let shape = [r, c, dim(&mut rng, 1, 3)];
                let axis = rng.below(3);
                let ins = [randn(&shape, &mut rng), randn(&[shape[axis]], &mut rng)];
                grad_check(
                    |t, v| {
                        let out = if kind == OpKind::ChannelBias {
                            v[0].add_channel(v[1], axis)?
                        } else {
                            v[0].mul_channel(v[1], axis)?
                        };
                        reduce(t, out, ws)
                    },
                    &ins,
                    DEFAULT_EPS,
                )?
            }
            OpKind::Sum | OpKind::Mean => {
                let ins = [randn(&[r, c], &mut rng)];
                let k = rng.normal();
                grad_check(
                    |_, v| {
                        // square first so the gradient depends on the input
                        let sq = v[0].mul(v[0])?;
                        let out = if kind == OpKind::Sum { sq.sum()? } else { sq.mean()? };
                        out.scale(k)
                    },
                    &ins,
                    DEFAULT_EPS,
                )?
            }
            OpKind::SumLastDim => {
                let ins = [randn(&[r, c], &mut rng)];
                let mean = rng.uniform() < 0.5;
                grad_check(
                    |t, v| reduce(t, if mean { v[0].mean_last_dim()? } else { v[0].sum_last_dim()? }, ws),
                    &ins,
                    DEFAULT_EPS,
                )?
            }
            OpKind::ConcatChannels => {
                let tail = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 3)];
                let ins = [randn(&[r, tail[0], tail[1]], &mut rng), randn(&[c, tail[0], tail[1]], &mut rng)];
                grad_check(|t, v| reduce(t, concat(&[v[0], v[1]])?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::Transpose2d => {
                let ins = [randn(&[r, c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].transpose_2d()?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::GatherSequence => {
                let n = r * c;
                let m = dim(&mut rng, 1, 2 * n);
                let idx: Rc<[usize]> = (0..m).map(|_| rng.below(n)).collect();
                let ins = [randn(&[r, c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].gather(idx.clone(), vec![m])?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::Reshape => {
                let ins = [randn(&[r, c], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].reshape(vec![c, r])?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::L2Normalize => {
                let ins = [randn(&[r, c.max(2)], &mut rng)];
                grad_check(|t, v| reduce(t, v[0].l2_normalize()?, ws), &ins, DEFAULT_EPS)?
            }
            OpKind::SelectiveScan => {
                let (l, d, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
                let ins = scan_case(l, d, n, &mut rng);
                grad_check(|t, v| reduce(t, selective_scan(scan_inputs(v))?, ws), &ins, DEFAULT_EPS)?
            }
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Random scan inputs with positive step sizes and negative decay rates.
fn scan_case(l: usize, d: usize, n: usize, rng: &mut Rng) -> [Tensor; 6] {
    [
        randn(&[l, d], rng),
        Tensor::from_fn([l, d], |_| rng.uniform_in(0.05, 1.0)),
        Tensor::from_fn([d, n], |_| -rng.uniform_in(0.1, 2.0)),
        randn(&[l, n], rng),
        randn(&[l, n], rng),
        randn(&[d], rng),
    ]
}

fn scan_inputs<'t>(v: &[Var<'t>]) -> ScanInputs<'t> {
    ScanInputs { x: v[0], dt: v[1], a: v[2], b: v[3], c: v[4], d_skip: v[5] }
}

/// Direct evaluation of the discretized recurrence, one state at a time.
pub fn naive_scan(ins: &[Tensor; 6]) -> Vec<f64> {
    let (l, d) = (ins[0].shape()[0], ins[0].shape()[1]);
    let n = ins[2].shape()[1];
    let [x, dt, a, b, c, dsk] = ins.each_ref().map(Tensor::values);
    let mut y = vec![0.0; l * d];
    for ch in 0..d {
        for s in 0..n {
            let mut h = 0.0;
            for t in 0..l {
                let delta = dt[t * d + ch];
                h = (delta * a[ch * n + s]).exp() * h + delta * b[t * n + s] * x[t * d + ch];
                y[t * d + ch] += c[t * n + s] * h;
            }
        }
        for t in 0..l {
            y[t * d + ch] += dsk[ch] * x[t * d + ch];
        }
    }
    y
}

pub fn scan_oracle(instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..instances as u64 {
        let mut rng = Rng::substream(seed, case);
        let ins = scan_case(dim(&mut rng, 1, 16), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), &mut rng);
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let fast = selective_scan(scan_inputs(&vars))?.value();
        let slow = naive_scan(&ins);
        worst = fast.iter().zip(&slow).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(worst)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranking loss by enumerating every `(i, j, k)` triple.
pub fn brute_rank(e: &[Vec<f64>], y: &[f64], tau: f64) -> f64 {
    let n = e.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let dij = (y[i] - y[j]).abs();
            let denom: f64 = (0..n)
                .filter(|&k| k != i && (y[i] - y[k]).abs() >= dij)
                .map(|k| (dot(&e[i], &e[k]) / tau).exp())
                .sum();
            total -= ((dot(&e[i], &e[j]) / tau).exp() / denom).ln();
        }
    }
    total / (n * (n - 1)) as f64
}

/// Supervised contrastive anatomy loss by direct summation.
pub fn brute_anatomy(e: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = e.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (dot(&e[i], &e[j]) / tau).exp()).sum();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let s: f64 = pos.iter().map(|&p| ((dot(&e[i], &e[p]) / tau).exp() / denom).ln()).sum();
        total -= s / pos.len() as f64;
    }
    total
}

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = rng.normals(d);
            let norm = dot(&v, &v).sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn loss_oracles(batches: usize, seed: u64) -> Result<(f64, f64)> {
    let (mut rank_err, mut anat_err) = (0.0f64, 0.0f64);
    for case in 0..batches as u64 {
        let mut rng = Rng::substream(seed, case);
        let n = 2 * dim(&mut rng, 2, 4);
        let d = dim(&mut rng, 2, 6);
        let tau = rng.uniform_in(0.1, 1.0);
        let e = unit_rows(n, d, &mut rng);
        // few distinct labels so ties occur
        let y: Vec<f64> = (0..n).map(|_| [0.05, 0.1, 0.25, 0.5][rng.below(4)]).collect();
        let mut labels: Vec<usize> = (0..n / 2).map(|_| rng.below(3)).collect();
        labels.extend(labels.clone());
        let flat: Vec<f64> = e.concat();
        let tape = Tape::new();
        let ev = tape.constant(vec![n, d], flat)?;
        rank_err = rank_err.max((loss_rank(ev, &y, tau)?.item() - brute_rank(&e, &y, tau)).abs());
        anat_err = anat_err.max((loss_anatomy(ev, &labels, tau)?.item() - brute_anatomy(&e, &labels, tau)).abs());
    }
    Ok((rank_err, anat_err))
}

fn rel_rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

/// Relative RMSE of the ray-marching projector against exact line integrals.
pub fn projector_oracle(size: usize, views: usize, seed: u64) -> Result<f64> {
    let phantom = make_phantom(Anatomy::Abdomen, &mut Rng::new(seed));
    let g = ScanGeometry::for_image(size, views)?;
    let numeric = project_numeric(&rasterize(&phantom, size), size, &g, 0.5 / size as f64)?;
    Ok(rel_rmse(&numeric.data, &project_analytic(&phantom, &g).data))
}

/// PSNR inside the unit disk of the reconstruction of a noiseless disk.
pub fn fbp_disk_psnr(size: usize, views: usize) -> Result<f64> {
    let phantom = EllipsePhantom {
        family: Anatomy::Abdomen,
        ellipses: vec![Ellipse::circle(0.1, -0.05, 0.6, 1.0)],
    };
    let g = ScanGeometry::for_image(size, views)?;
    let recon = fbp(&project_analytic(&phantom, &g), &g, size)?;
    let truth = rasterize(&phantom, size);
    let inside: Vec<usize> = (0..size * size)
        .filter(|&k| pixel_x(k % size, size).hypot(pixel_y(k / size, size)) <= 1.0)
        .collect();
    let a: Vec<f64> = inside.iter().map(|&k| recon[k]).collect();
    let b: Vec<f64> = inside.iter().map(|&k| truth[k]).collect();
    psnr(&a, &b, 1.0)
}

/// Largest deviation from the clean image when the true residual is supplied.
pub fn sampler_exactness(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let sched = DiffusionSchedule::new(100, 0.2)?;
    let n = 64;
    let nd: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let ld: Vec<f64> = nd.iter().map(|v| v + 0.1 * rng.normal()).collect();
    let res: Vec<f64> = ld.iter().zip(&nd).map(|(l, c)| l - c).collect();
    let mut worst = 0.0f64;
    for steps in [1, 2, 10] {
        for stochastic in [false, true] {
            let oracle = OraclePredictor::new(res.clone());
            let plan = SamplerPlan::uniform(100, steps, stochastic)?;
            let out = sample_unclamped(&oracle, &ld, &plan, &sched, &mut rng)?;
            worst = out.iter().zip(&nd).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    Ok(worst)
}

/// Replaces every parameter with small random values so that no gradient
/// path is blocked by zero initialization.
pub fn randomize(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    for t in store.tensors_mut() {
        for v in t.values_mut() {
            *v = std * rng.normal();
        }
    }
}

/// Gradient check of `f(input, params)` over the input and every parameter,
/// perturbing at most `per_input` elements of each.
fn block_check<F>(store: &ParamStore, input: Tensor, per_input: usize, seed: u64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &Bound<'t>) -> Result<Var<'t>>,
{
    let mut ins = vec![input];
    ins.extend(store.tensors().iter().cloned());
    grad_check_sampled(
        |tape, v| {
            let p = Bound(v[1..].to_vec());
            f(tape, v[0], &p)
        },
        &ins,
        DEFAULT_EPS,
        Some((per_input, &mut Rng::new(seed))),
    )
}

const BLOCK_C: usize = 4;
const BLOCK_HW: usize = 4;

fn feature(rng: &mut Rng) -> Tensor {
    randn(&[BLOCK_C, BLOCK_HW, BLOCK_HW], rng)
}

fn block_dims() -> DacbDims {
    DacbDims { channels: BLOCK_C, t_dim: 4, d_e: 3, n_state: 2, scan_directions: 4 }
}

fn condition<'t>(tape: &'t Tape, seed: u64) -> Result<Condition<'t>> {
    let mut rng = Rng::new(seed);
    let d = block_dims();
    Ok(Condition {
        t_emb: tape.constant(vec![1, d.t_dim], rng.normals(d.t_dim))?,
        e_d: tape.constant(vec![1, d.d_e], rng.normals(d.d_e))?,
        e_a: tape.constant(vec![1, d.d_e], rng.normals(d.d_e))?,
    })
}

pub fn rleb_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = Rleb::new(&mut store, "rleb", BLOCK_C, InitMode::Default, &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    block_check(&store, feature(&mut rng), 40, seed, |t, x, p| reduce(t, block.forward(p, x)?, seed))
}

pub fn cssm_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let d = block_dims();
    let block = Cssm::new(&mut store, "cssm", d.channels, d.n_state, d.d_e, InitMode::Default, &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    block_check(&store, feature(&mut rng), 40, seed, |t, x, p| {
        let e_a = condition(t, seed)?.e_a;
        reduce(t, block.forward(p, x, e_a)?, seed)
    })
}

pub fn attention_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = TransposedAttention::new(&mut store, "ta", BLOCK_C, &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    block_check(&store, feature(&mut rng), 40, seed, |t, x, p| reduce(t, block.forward(p, x)?, seed))
}

pub fn dacb_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = Dacb::new(&mut store, "dacb", block_dims(), DacbVariant::Full, InitMode::Default, &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    block_check(&store, feature(&mut rng), 20, seed, |t, x, p| {
        let cond = condition(t, seed)?;
        reduce(t, block.forward(p, x, cond)?, seed)
    })
}

/// Small denoiser for gradient checks of a full training step.
pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig { widths: vec![4, 8], n_state: 2, d_e: 3, scan_directions: 4, variant: DacbVariant::Full }
}

pub fn training_step_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut net = Denoiser::new(tiny_denoiser_config(), InitMode::Default, &mut rng)?;
    randomize(&mut net.params, 0.2, &mut rng);
    let size = 16;
    let nd: Vec<f64> = (0..size * size).map(|_| rng.uniform()).collect();
    let item = TrainItem {
        size,
        ldct: nd.iter().map(|v| v + 0.05 * rng.normal()).collect(),
        ndct: nd,
        e_d: rng.normals(3),
        e_a: rng.normals(3),
    };
    let sched = DiffusionSchedule::new(100, 0.2)?;
    let ins = net.params.tensors().to_vec();
    grad_check_sampled(
        |tape, v| {
            let p = Bound(v.to_vec());
            residual_loss(&net, &p, tape, std::slice::from_ref(&item), &sched, &mut Rng::new(seed))
        },
        &ins,
        DEFAULT_EPS,
        Some((3, &mut Rng::new(seed))),
    )
}

/// Largest deviation of a zero-initialized block from the identity and of a
/// zero-initialized denoiser from the zero map.
pub fn identity_at_init(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for variant in [DacbVariant::Full, DacbVariant::DoseOnly, DacbVariant::AnatomyOnly] {
        let mut store = ParamStore::new();
        let block = Dacb::new(&mut store, "dacb", block_dims(), variant, InitMode::Zero, &mut rng);
        let x = feature(&mut rng);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = block.forward(&p, tape.leaf(&x), condition(&tape, seed)?)?.value();
        worst = out.iter().zip(x.values()).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    let net = Denoiser::new(tiny_denoiser_config(), InitMode::Default, &mut rng)?;
    let size = 16;
    let img = rng.normals(size * size);
    let out = net.predict(&img, &img, size, 50, &rng.normals(3), &rng.normals(3))?;
    Ok(out.iter().fold(worst, |m, v| m.max(v.abs())))
}

/// Mean-variance check of the marginal against a chain of single steps.
pub fn forward_chain_error(seed: u64) -> Result<f64> {
    let sched = DiffusionSchedule::new(20, 0.2)?;
    let mut rng = Rng::new(seed);
    let (nd, res) = (0.3, 0.2);
    let n = 10_000;
    let mut max_z = 0.0f64;
    let mut x = vec![nd; n];
    for t in 1..=sched.steps {
        let sd = sched.beta_sq(t).sqrt();
        for v in x.iter_mut() {
            *v += sched.alpha(t) * res + sd * rng.normal();
        }
        let marginal = forward_sample(&[nd], &[res], t, &[0.0], &sched)[0];
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let b2 = sched.beta_bar[t].powi(2);
        max_z = max_z.max((mean - marginal).abs() / (b2 / n as f64).sqrt());
        max_z = max_z.max((var - b2).abs() / (b2 * (2.0 / (n - 1) as f64).sqrt()));
    }
    Ok(max_z)
}

/// Every suite; `quick` shrinks the projector oracle grid.
pub fn run_all(seed: u64, quick: bool) -> Vec<SuiteResult> {
    let mut out: Vec<SuiteResult> = OpKind::ALL
        .into_iter()
        .map(|k| run(format!("op:{}", k.name()), 1e-6, || op_gradcheck(k, 20, seed)))
        .collect();
    out.push(run("block:rleb", 1e-4, || rleb_gradcheck(seed)));
    out.push(run("block:cssm", 1e-4, || cssm_gradcheck(seed)));
    out.push(run("block:attention", 1e-4, || attention_gradcheck(seed)));
    out.push(run("block:dacb", 1e-4, || dacb_gradcheck(seed)));
    out.push(run("block:training_step", 1e-4, || training_step_gradcheck(seed)));
    out.push(run("scan_oracle", 1e-12, || scan_oracle(100, seed)));
    let losses = loss_oracles(50, seed).unwrap_or((f64::INFINITY, f64::INFINITY));
    out.push(run("loss_oracle:rank", 1e-10, || Ok(losses.0)));
    out.push(run("loss_oracle:anatomy", 1e-10, || Ok(losses.1)));
    let size = if quick { 64 } else { 256 };
    out.push(run("projector_oracle", 0.02, || projector_oracle(size, 180, seed)));
    // expressed as a shortfall below 25 dB so that smaller is better; the
    // ramp filter needs the full grid to get there, so no quick variant
    out.push(run("fbp_disk", 1e-9, || fbp_disk_psnr(256, 512).map(|p| (25.0 - p).max(0.0))));
    out.push(run("identity_at_init", f64::MIN_POSITIVE, || identity_at_init(seed)));
    out.push(run("sampler_exactness", 1e-10, || sampler_exactness(seed)));
    out.push(run("forward_chain_moments", 4.0, || forward_chain_error(seed)));
    out
}
