//! RLEB, modulation, conditional selective scan, transposed attention and the
//! dose/anatomy-aware block that composes them.

use std::rc::Rc;

use super::layers::{channel_layer_norm, he_std, Conv3, Linear, Pointwise};
use crate::error::{Error, Result};
use crate::numcore::{selective_scan, Bound, ParamId, ParamStore, Rng, ScanInputs, Tensor, Var};

/// Which initialization to use for projections that are not forced to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Trainable start: small random CSSM output and RLEB second conv.
    Default,
    /// Every residual branch output starts at exactly zero.
    Zero,
}

/// Residual local-enhance block: `F + conv(silu(conv(F)))`.
#[derive(Clone, Debug)]
pub struct Rleb {
    conv1: Conv3,
    conv2: Conv3,
}

impl Rleb {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, mode: InitMode, rng: &mut Rng) -> Self {
        let std2 = match mode {
            InitMode::Default => 0.1 * he_std(9 * c),
            InitMode::Zero => 0.0,
        };
        Self {
            conv1: Conv3::new(store, &format!("{name}.conv1"), c, c, he_std(9 * c), 1, rng),
            conv2: Conv3::new(store, &format!("{name}.conv2"), c, c, std2, 1, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, f)?.silu()?;
        f.add(self.conv2.forward(p, h)?)
    }
}

/// The six per-channel modulation vectors.
pub struct Modulation<'t> {
    pub gamma1: Var<'t>,
    pub beta1: Var<'t>,
    pub alpha1: Var<'t>,
    pub gamma2: Var<'t>,
    pub beta2: Var<'t>,
    pub alpha2: Var<'t>,
}

/// `Linear(silu(Linear(t_emb) + Adapter(e_d)))`, final layer zero-initialized.
#[derive(Clone, Debug)]
pub struct ModulationMlp {
    time: Linear,
    adapter: Linear,
    pub fin: Linear,
    channels: usize,
}

impl ModulationMlp {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, t_dim: usize, d_e: usize, rng: &mut Rng) -> Self {
        let hidden = 4 * c;
        Self {
            time: Linear::new(store, &format!("{name}.time"), t_dim, hidden, he_std(t_dim), true, rng),
            adapter: Linear::new(store, &format!("{name}.adapter"), d_e, hidden, he_std(d_e), false, rng),
            fin: Linear::new(store, &format!("{name}.final"), hidden, 6 * c, 0.0, true, rng),
            channels: c,
        }
    }

    /// `t_emb` is 1×t_dim and `e_d` is 1×d_e.
    pub fn forward<'t>(&self, p: &Bound<'t>, t_emb: Var<'t>, e_d: Var<'t>) -> Result<Modulation<'t>> {
        let h = self.time.forward(p, t_emb)?.add(self.adapter.forward(p, e_d)?)?.silu()?;
        let out = self.fin.forward(p, h)?;
        let c = self.channels;
        let part = |k: usize| out.slice(k * c, c, vec![c]);
        Ok(Modulation {
            gamma1: part(0)?,
            beta1: part(1)?,
            alpha1: part(2)?,
            gamma2: part(3)?,
            beta2: part(4)?,
            alpha2: part(5)?,
        })
    }
}

/// A scan order over an H×W grid: position `l` of the sequence reads pixel
/// `order[l]` (row-major pixel index).
pub type ScanOrder = Rc<[usize]>;

/// Row-major forward/backward and column-major forward/backward orders.
pub fn four_directions(h: usize, w: usize) -> [ScanOrder; 4] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    [row.clone().into(), rev(&row).into(), col.clone().into(), rev(&col).into()]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (l, &px) in order.iter().enumerate() {
        inv[px] = l;
    }
    inv
}

/// Row indices of an `L×D` matrix permuted to element indices.
fn row_gather(rows: &[usize], d: usize) -> Rc<[usize]> {
    rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect()
}

/// Conditional selective scan over four spatial directions.
#[derive(Clone, Debug)]
pub struct Cssm {
    in_proj: Pointwise,
    w_dt: Linear,
    w_b: Linear,
    w_c: Linear,
    a_log: ParamId,
    d_skip: ParamId,
    pub anatomy: Linear,
    out_proj: Pointwise,
    dim: usize,
    n_state: usize,
    directions: usize,
}

impl Cssm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, n_state: usize, d_e: usize, mode: InitMode, rng: &mut Rng) -> Self {
        let dim = c;
        let in_proj = Pointwise::new(store, &format!("{name}.in_proj"), c, dim, (1.0 / c as f64).sqrt(), false, rng);
        let w_dt = Linear::new(store, &format!("{name}.dt_proj"), dim, dim, 0.1 / (dim as f64).sqrt(), true, rng);
        // Δ bias so that softplus(bias) spans [1e-3, 1e-1] log-uniformly
        let dt_bias: Vec<f64> = (0..dim)
            .map(|_| {
                let dt = (rng.uniform_in(1e-3f64.ln(), 1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        *store.get_mut(w_dt.bias.unwrap()) = Tensor::new(vec![dim], dt_bias).unwrap().with_requires_grad(true);
        let w_b = Linear::new(store, &format!("{name}.b_proj"), dim, n_state, (1.0 / dim as f64).sqrt(), false, rng);
        let w_c = Linear::new(store, &format!("{name}.c_proj"), dim, n_state, (1.0 / dim as f64).sqrt(), false, rng);
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(vec![dim, n_state], |i| ((i % n_state) as f64 + 1.0).ln()),
        );
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::full(vec![dim], 1.0));
        let anatomy = Linear::new(store, &format!("{name}.anatomy"), d_e, n_state, 0.0, false, rng);
        let out_std = match mode {
            InitMode::Default => 0.1 * (1.0 / dim as f64).sqrt(),
            InitMode::Zero => 0.0,
        };
        let out_proj = Pointwise::new(store, &format!("{name}.out_proj"), dim, c, out_std, false, rng);
        Self { in_proj, w_dt, w_b, w_c, a_log, d_skip, anatomy, out_proj, dim, n_state, directions: 4 }
    }

    /// Uses the first `n` of [`four_directions`] (1, 2 or 4).
    pub fn with_directions(mut self, n: usize) -> Self {
        self.directions = n;
        self
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>, e_a: Var<'t>) -> Result<Var<'t>> {
        let s = f.shape();
        let orders = four_directions(s[1], s[2]);
        self.forward_with(p, f, e_a, &orders[..self.directions.min(4)])
    }

    /// Scan with explicit direction orders; outputs are merged as
    /// `(y0 + y1) + (y2 + y3)` for four orders, in sequence otherwise.
    pub fn forward_with<'t>(&self, p: &Bound<'t>, f: Var<'t>, e_a: Var<'t>, orders: &[ScanOrder]) -> Result<Var<'t>> {
        let s = f.shape();
        let (h, w) = (s[1], s[2]);
        let len = h * w;
        if orders.is_empty() || orders.iter().any(|o| o.len() != len) {
            return Err(Error::invalid("scan orders must cover every pixel"));
        }
        let (d, n) = (self.dim, self.n_state);
        // L×D sequence in row-major pixel order
        let x = self.in_proj.forward(p, f)?.reshape(vec![d, len])?.transpose_2d()?;
        let dt = self.w_dt.forward(p, x)?.softplus()?;
        let b = self.w_b.forward(p, x)?;
        let c_bias = self.anatomy.forward(p, e_a)?.reshape(vec![n])?;
        let c = self.w_c.forward(p, x)?.add_channel(c_bias, 1)?;
        let a = p[self.a_log].exp()?.scale(-1.0)?;
        let mut outs = Vec::with_capacity(orders.len());
        for order in orders {
            let gd = row_gather(order, d);
            let gn = row_gather(order, n);
            let y = selective_scan(ScanInputs {
                x: x.gather(gd.clone(), vec![len, d])?,
                dt: dt.gather(gd, vec![len, d])?,
                a,
                b: b.gather(gn.clone(), vec![len, n])?,
                c: c.gather(gn, vec![len, n])?,
                d_skip: p[self.d_skip],
            })?;
            // back to row-major pixel order
            outs.push(y.gather(row_gather(&inverse(order), d), vec![len, d])?);
        }
        let merged = if outs.len() == 4 {
            outs[0].add(outs[1])?.add(outs[2].add(outs[3])?)?
        } else {
            let mut acc = outs[0];
            for y in &outs[1..] {
                acc = acc.add(*y)?;
            }
            acc
        };
        let y = merged.transpose_2d()?.reshape(vec![d, h, w])?;
        self.out_proj.forward(p, y)
    }
}

/// Single-head self-attention across channels with a learnable temperature.
#[derive(Clone, Debug)]
pub struct TransposedAttention {
    q: Pointwise,
    k: Pointwise,
    v: Pointwise,
    pub out: Pointwise,
    temperature: ParamId,
}

impl TransposedAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / c as f64).sqrt();
        Self {
            q: Pointwise::new(store, &format!("{name}.q"), c, c, std, false, rng),
            k: Pointwise::new(store, &format!("{name}.k"), c, c, std, false, rng),
            v: Pointwise::new(store, &format!("{name}.v"), c, c, std, false, rng),
            out: Pointwise::new(store, &format!("{name}.out"), c, c, 0.0, false, rng),
            temperature: store.add(format!("{name}.temperature"), Tensor::full(vec![1], 1.0)),
        }
    }

    /// The C×C attention map (rows sum to one).
    pub fn attention<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let s = f.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let q = self.q.forward(p, f)?.reshape(vec![c, hw])?.l2_normalize()?;
        let k = self.k.forward(p, f)?.reshape(vec![c, hw])?.l2_normalize()?;
        q.matmul(k.transpose_2d()?)?.scale_by(p[self.temperature])?.softmax_last_dim()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let s = f.shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let attn = self.attention(p, f)?;
        let v = self.v.forward(p, f)?.reshape(vec![c, hw])?;
        let y = attn.matmul(v)?.reshape(s)?;
        self.out.forward(p, y)
    }
}

/// Which conditioning paths a block keeps (for ablations).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DacbVariant {
    /// Dose modulation, anatomy-conditioned scan and transposed attention.
    Full,
    /// Dose modulation only: `F + α1⊙(γ1⊙LN(F) + β1⊙F)`.
    DoseOnly,
    /// Anatomy-conditioned scan only: `F + CSSM(LN(F), e_a)`.
    AnatomyOnly,
}

impl DacbVariant {
    pub fn name(self) -> &'static str {
        match self {
            DacbVariant::Full => "full",
            DacbVariant::DoseOnly => "dose-only",
            DacbVariant::AnatomyOnly => "anatomy-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [DacbVariant::Full, DacbVariant::DoseOnly, DacbVariant::AnatomyOnly]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// Conditioning inputs shared by every block of one forward pass.
#[derive(Clone, Copy)]
pub struct Condition<'t> {
    /// 1×t_dim
    pub t_emb: Var<'t>,
    /// 1×d_e
    pub e_d: Var<'t>,
    /// 1×d_e
    pub e_a: Var<'t>,
}

/// Dose- and anatomy-conditioned block.
#[derive(Clone, Debug)]
pub struct Dacb {
    pub variant: DacbVariant,
    norm1: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    pub modulation: Option<ModulationMlp>,
    pub cssm: Option<Cssm>,
    pub attention: Option<TransposedAttention>,
}

#[derive(Clone, Copy, Debug)]
pub struct DacbDims {
    pub channels: usize,
    pub t_dim: usize,
    pub d_e: usize,
    pub n_state: usize,
    pub scan_directions: usize,
}

impl Dacb {
    pub fn new(store: &mut ParamStore, name: &str, dims: DacbDims, variant: DacbVariant, mode: InitMode, rng: &mut Rng) -> Self {
        let c = dims.channels;
        let norm = |k: usize, store: &mut ParamStore| {
            (
                store.add(format!("{name}.norm{k}.weight"), Tensor::full(vec![c], 1.0)),
                store.add(format!("{name}.norm{k}.bias"), Tensor::zeros(vec![c])),
            )
        };
        let norm1 = norm(1, store);
        let norm2 = norm(2, store);
        let use_mod = variant != DacbVariant::AnatomyOnly;
        let use_scan = variant != DacbVariant::DoseOnly;
        let use_attn = variant == DacbVariant::Full;
        Self {
            variant,
            norm1,
            norm2,
            modulation: use_mod.then(|| ModulationMlp::new(store, &format!("{name}.modulation"), c, dims.t_dim, dims.d_e, rng)),
            cssm: use_scan.then(|| {
                Cssm::new(store, &format!("{name}.cssm"), c, dims.n_state, dims.d_e, mode, rng)
                    .with_directions(dims.scan_directions)
            }),
            attention: use_attn.then(|| TransposedAttention::new(store, &format!("{name}.attention"), c, rng)),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>, cond: Condition<'t>) -> Result<Var<'t>> {
        let ln1 = channel_layer_norm(f, p[self.norm1.0], p[self.norm1.1])?;
        match self.variant {
            DacbVariant::Full => {
                let m = self.modulation.as_ref().unwrap().forward(p, cond.t_emb, cond.e_d)?;
                let f1 = ln1.mul_channel(m.gamma1, 0)?.add(f.mul_channel(m.beta1, 0)?)?;
                let scanned = self.cssm.as_ref().unwrap().forward(p, f1, cond.e_a)?;
                let fp = scanned.add(f1.mul_channel(m.alpha1, 0)?)?.add(f)?;
                let ln2 = channel_layer_norm(fp, p[self.norm2.0], p[self.norm2.1])?;
                let f2 = ln2.mul_channel(m.gamma2, 0)?.add(fp.mul_channel(m.beta2, 0)?)?;
                let attn = self.attention.as_ref().unwrap().forward(p, fp)?;
                attn.add(f2.mul_channel(m.alpha2, 0)?)?.add(fp)
            }
            DacbVariant::DoseOnly => {
                let m = self.modulation.as_ref().unwrap().forward(p, cond.t_emb, cond.e_d)?;
                let f1 = ln1.mul_channel(m.gamma1, 0)?.add(f.mul_channel(m.beta1, 0)?)?;
                f1.mul_channel(m.alpha1, 0)?.add(f)
            }
            DacbVariant::AnatomyOnly => self.cssm.as_ref().unwrap().forward(p, ln1, cond.e_a)?.add(f),
        }
    }
}
