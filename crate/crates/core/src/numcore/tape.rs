//! Dynamic tape for reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its output and whatever it needs
//! for the backward rule. [`Var`] is a copyable handle into the tape.
//! Leaves created from tensors with `requires_grad` receive gradients on
//! [`Tape::backward`]; repeated backward calls accumulate.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv2d3x3Pad1,
    PointwiseConv,
    LayerNorm,
    SoftmaxLastDim,
    Softplus,
    Exp,
    Log,
    Silu,
    Add,
    Sub,
    Mul,
    ScalarScale,
    ChannelBias,
    ChannelScale,
    Sum,
    Mean,
    SumLastDim,
    ConcatChannels,
    Transpose2d,
    GatherSequence,
    Reshape,
    L2Normalize,
    SelectiveScan,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Conv2d3x3Pad1,
        OpKind::PointwiseConv,
        OpKind::LayerNorm,
        OpKind::SoftmaxLastDim,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Silu,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarScale,
        OpKind::ChannelBias,
        OpKind::ChannelScale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLastDim,
        OpKind::ConcatChannels,
        OpKind::Transpose2d,
        OpKind::GatherSequence,
        OpKind::Reshape,
        OpKind::L2Normalize,
        OpKind::SelectiveScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d3x3Pad1 => "conv2d_3x3_pad1",
            OpKind::PointwiseConv => "pointwise_conv",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxLastDim => "softmax_last_dim",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Silu => "silu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarScale => "scalar_scale",
            OpKind::ChannelBias => "channel_bias",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastDim => "sum_last_dim",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Transpose2d => "transpose_2d",
            OpKind::GatherSequence => "gather_sequence",
            OpKind::Reshape => "reshape",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SelectiveScan => "selective_scan",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupt the backward rule of `kind` on every tape created afterwards on
/// this thread. Test harness hook for the verification suites.
pub fn inject_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

const FAULT_FACTOR: f64 = 1.25;

struct ScanSaved {
    x: usize,
    dt: usize,
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    len: usize,
    dim: usize,
    n_state: usize,
    states: Vec<f64>,
}

enum Op {
    Leaf,
    Const,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Pointwise { x: usize, w: usize, bias: Option<usize>, c: usize, o: usize, hw: usize },
    LayerNorm { x: usize, gamma: Option<usize>, beta: Option<usize>, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: usize, cols: usize },
    Softplus { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Silu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    ScaleBy { x: usize, s: usize },
    ChannelBias { x: usize, b: usize, ch: usize, inner: usize },
    ChannelScale { x: usize, s: usize, ch: usize, inner: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize, cols: usize, scale: f64 },
    Concat { parts: Vec<usize> },
    Transpose { x: usize, r: usize, c: usize },
    Gather { x: usize, idx: Rc<[usize]> },
    Reshape { x: usize },
    L2Normalize { x: usize, cols: usize, norms: Vec<f64> },
    Scan(Box<ScanSaved>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    kind: Option<OpKind>,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(HashMap::new()),
            fault: FAULT.with(|f| f.get()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor. It receives gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.leaf_raw(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Records a tensor that participates in differentiation.
    pub fn var(&self, t: &Tensor) -> Var<'_> {
        self.leaf_raw(t.shape().to_vec(), t.values().to_vec(), true)
    }

    pub fn constant(&self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, values)?;
        let shape = t.shape().to_vec();
        Ok(self.leaf_raw(shape, t.into_values(), false))
    }

    fn leaf_raw(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            kind: None,
            op: if requires_grad { Op::Leaf } else { Op::Const },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, kind: OpKind, shape: Vec<usize>, value: Vec<f64>, inputs: &[usize], op: Op) -> Result<Var<'_>> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: kind.name().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            kind: Some(kind),
            op: if requires_grad { op } else { Op::Const },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Populates gradients of `loss` on every reachable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NotScalar(nodes[loss.id].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::Const => {}
                op => {
                    let scale = if node.kind.is_some() && node.kind == self.fault {
                        FAULT_FACTOR
                    } else {
                        1.0
                    };
                    let mut sink = GradSink {
                        nodes: &nodes,
                        grads: &mut grads,
                        scale,
                    };
                    backprop(op, node, &g, &nodes, &mut sink);
                }
            }
        }
        Ok(())
    }
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
    scale: f64,
}

impl GradSink<'_> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn add(&mut self, id: usize, mut g: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        if self.scale != 1.0 {
            g.iter_mut().for_each(|v| *v *= self.scale);
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }
}

// ---------------------------------------------------------------------------
// kernels

/// out (m×n) += a (m×k) · b (k×n)
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// g (m×n) · bᵀ where b is k×n → m×k
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ · g where a is m×k, g is m×n → k×n
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Output column range `[lo, hi)` whose tap `k` lands inside `0..w`.
#[inline]
fn conv_valid(k: usize, w: usize, wo: usize, stride: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if w + 1 > k { ((w - 1 + 1 - k) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let ConvGeom { c, h, w, o, ho, wo, stride } = g;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[oc]);
        }
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wt[((oc * c + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = conv_valid(kx, w, wo, stride);
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let xrow = &xin[(iy - 1) * w..iy * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox + kx - 1];
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(x: &[f64], wt: &[f64], gout: &[f64], geom: ConvGeom, need_x: bool, need_w: bool) -> (Vec<f64>, Vec<f64>) {
    let ConvGeom { c, h, w, o, ho, wo, stride } = geom;
    let mut gx = if need_x { vec![0.0; c * h * w] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; o * c * 9] } else { Vec::new() };
    for oc in 0..o {
        let gplane = &gout[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((oc * c + ic) * 3 + ky) * 3 + kx;
                    let wv = wt[widx];
                    let (lo, hi) = conv_valid(kx, w, wo, stride);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let grow = &gplane[oy * wo + lo..oy * wo + hi];
                        let row0 = ic * h * w + (iy - 1) * w;
                        if stride == 1 {
                            let start = lo + kx - 1;
                            let xs = &xin[(iy - 1) * w + start..(iy - 1) * w + start + grow.len()];
                            if need_w {
                                acc += grow.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                            }
                            if need_x {
                                let gxs = &mut gx[row0 + start..row0 + start + grow.len()];
                                for (d, g) in gxs.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            let xrow = &xin[(iy - 1) * w..iy * w];
                            for (k, g) in grow.iter().enumerate() {
                                let ix = (lo + k) * stride + kx - 1;
                                acc += g * xrow[ix];
                                if need_x {
                                    gx[row0 + ix] += wv * g;
                                }
                            }
                        }
                    }
                    if need_w {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// backward rules

fn backprop(op: &Op, node: &Node, g: &[f64], nodes: &[Node], sink: &mut GradSink<'_>) {
    let val = |id: usize| nodes[id].value.as_slice();
    match op {
        Op::Leaf | Op::Const => {}
        Op::MatMul { a, b, m, k, n } => {
            if sink.wants(*a) {
                sink.add(*a, matmul_a_bt(g, val(*b), *m, *k, *n));
            }
            if sink.wants(*b) {
                sink.add(*b, matmul_at_b(val(*a), g, *m, *k, *n));
            }
        }
        Op::Conv { x, w, bias, geom } => {
            let (gx, gw) = conv_backward(val(*x), val(*w), g, *geom, sink.wants(*x), sink.wants(*w));
            if sink.wants(*x) {
                sink.add(*x, gx);
            }
            if sink.wants(*w) {
                sink.add(*w, gw);
            }
            if let Some(b) = bias {
                let plane = geom.ho * geom.wo;
                let gb = (0..geom.o).map(|oc| g[oc * plane..(oc + 1) * plane].iter().sum()).collect();
                sink.add(*b, gb);
            }
        }
        Op::Pointwise { x, w, bias, c, o, hw } => {
            // out (o×hw) = W (o×c) · X (c×hw)
            if sink.wants(*x) {
                sink.add(*x, matmul_at_b(val(*w), g, *o, *c, *hw));
            }
            if sink.wants(*w) {
                sink.add(*w, matmul_a_bt(g, val(*x), *o, *c, *hw));
            }
            if let Some(b) = bias {
                let gb = (0..*o).map(|oc| g[oc * hw..(oc + 1) * hw].iter().sum()).collect();
                sink.add(*b, gb);
            }
        }
        Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
            let cols = *cols;
            let rows = g.len() / cols;
            let gam = gamma.map(val);
            if let Some(gid) = gamma {
                let mut gg = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        gg[j] += g[r * cols + j] * xhat[r * cols + j];
                    }
                }
                sink.add(*gid, gg);
            }
            if let Some(bid) = beta {
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        gb[j] += g[r * cols + j];
                    }
                }
                sink.add(*bid, gb);
            }
            if sink.wants(*x) {
                let mut gx = vec![0.0; g.len()];
                let mut gxh = vec![0.0; cols];
                for r in 0..rows {
                    let row = r * cols..(r + 1) * cols;
                    for j in 0..cols {
                        gxh[j] = g[row.start + j] * gam.map_or(1.0, |gm| gm[j]);
                    }
                    let xh = &xhat[row.clone()];
                    let mean_g = gxh.iter().sum::<f64>() / cols as f64;
                    let mean_gx = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        gx[row.start + j] = rstd[r] * (gxh[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                sink.add(*x, gx);
            }
        }
        Op::Softmax { x, cols } => {
            let y = &node.value;
            let mut gx = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let row = r * cols..(r + 1) * cols;
                let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                for j in row {
                    gx[j] = y[j] * (g[j] - dot);
                }
            }
            sink.add(*x, gx);
        }
        Op::Softplus { x } => {
            let gx = val(*x).iter().zip(g).map(|(&xv, &gv)| gv * sigmoid(xv)).collect();
            sink.add(*x, gx);
        }
        Op::Exp { x } => {
            let gx = node.value.iter().zip(g).map(|(y, gv)| y * gv).collect();
            sink.add(*x, gx);
        }
        Op::Log { x } => {
            let gx = val(*x).iter().zip(g).map(|(xv, gv)| gv / xv).collect();
            sink.add(*x, gx);
        }
        Op::Silu { x } => {
            let gx = val(*x)
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })
                .collect();
            sink.add(*x, gx);
        }
        Op::Add { a, b } => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            if sink.wants(*a) {
                sink.add(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
            }
            if sink.wants(*b) {
                sink.add(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
            }
        }
        Op::Scale { x, c } => sink.add(*x, g.iter().map(|v| v * c).collect()),
        Op::ScaleBy { x, s } => {
            let sv = val(*s)[0];
            if sink.wants(*x) {
                sink.add(*x, g.iter().map(|v| v * sv).collect());
            }
            if sink.wants(*s) {
                let gs = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                sink.add(*s, vec![gs]);
            }
        }
        Op::ChannelBias { x, b, ch, inner } => {
            sink.add(*x, g.to_vec());
            if sink.wants(*b) {
                let mut gb = vec![0.0; *ch];
                for (i, gv) in g.iter().enumerate() {
                    gb[(i / inner) % ch] += gv;
                }
                sink.add(*b, gb);
            }
        }
        Op::ChannelScale { x, s, ch, inner } => {
            let sv = val(*s);
            if sink.wants(*x) {
                let gx = g.iter().enumerate().map(|(i, gv)| gv * sv[(i / inner) % ch]).collect();
                sink.add(*x, gx);
            }
            if sink.wants(*s) {
                let xv = val(*x);
                let mut gs = vec![0.0; *ch];
                for (i, gv) in g.iter().enumerate() {
                    gs[(i / inner) % ch] += gv * xv[i];
                }
                sink.add(*s, gs);
            }
        }
        Op::Sum { x } => {
            let n = nodes[*x].value.len();
            sink.add(*x, vec![g[0]; n]);
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.len();
            sink.add(*x, vec![g[0] / n as f64; n]);
        }
        Op::SumLast { x, cols, scale } => {
            let gx = (0..g.len() * cols).map(|i| g[i / cols] * scale).collect();
            sink.add(*x, gx);
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                sink.add(p, g[off..off + n].to_vec());
                off += n;
            }
        }
        Op::Transpose { x, r, c } => {
            // y is c×r with y[j][i] = x[i][j]
            let mut gx = vec![0.0; r * c];
            for i in 0..*r {
                for j in 0..*c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            sink.add(*x, gx);
        }
        Op::Gather { x, idx } => {
            let mut gx = vec![0.0; nodes[*x].value.len()];
            for (gv, &i) in g.iter().zip(idx.iter()) {
                gx[i] += gv;
            }
            sink.add(*x, gx);
        }
        Op::Reshape { x } => sink.add(*x, g.to_vec()),
        Op::L2Normalize { x, cols, norms } => {
            let y = &node.value;
            let mut gx = vec![0.0; g.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                let row = r * cols..(r + 1) * cols;
                let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                for j in row {
                    gx[j] = (g[j] - y[j] * dot) / nrm;
                }
            }
            sink.add(*x, gx);
        }
        Op::Scan(s) => scan_backward(s, g, nodes, sink),
    }
}

fn scan_backward(s: &ScanSaved, g: &[f64], nodes: &[Node], sink: &mut GradSink<'_>) {
    let (len, dim, ns) = (s.len, s.dim, s.n_state);
    let x = &nodes[s.x].value;
    let dt = &nodes[s.dt].value;
    let a = &nodes[s.a].value;
    let b = &nodes[s.b].value;
    let c = &nodes[s.c].value;
    let dsk = &nodes[s.d].value;
    let mut gx = vec![0.0; len * dim];
    let mut gdt = vec![0.0; len * dim];
    let mut ga = vec![0.0; dim * ns];
    let mut gb = vec![0.0; len * ns];
    let mut gc = vec![0.0; len * ns];
    let mut gd = vec![0.0; dim];
    let mut gh = vec![0.0; dim * ns];
    for l in (0..len).rev() {
        let h_cur = &s.states[l * dim * ns..(l + 1) * dim * ns];
        for d in 0..dim {
            let gy = g[l * dim + d];
            let xv = x[l * dim + d];
            let dv = dt[l * dim + d];
            gd[d] += gy * xv;
            gx[l * dim + d] += gy * dsk[d];
            let mut gdt_acc = 0.0;
            let mut gx_acc = 0.0;
            for n in 0..ns {
                let k = d * ns + n;
                let hv = h_cur[k];
                gc[l * ns + n] += gy * hv;
                let ghv = gh[k] + gy * c[l * ns + n];
                let hprev = if l > 0 { s.states[(l - 1) * dim * ns + k] } else { 0.0 };
                let abar = (dv * a[k]).exp();
                let t = ghv * hprev * abar;
                ga[k] += t * dv;
                gdt_acc += t * a[k] + ghv * b[l * ns + n] * xv;
                gb[l * ns + n] += ghv * dv * xv;
                gx_acc += ghv * dv * b[l * ns + n];
                gh[k] = ghv * abar;
            }
            gdt[l * dim + d] += gdt_acc;
            gx[l * dim + d] += gx_acc;
        }
    }
    sink.add(s.x, gx);
    sink.add(s.dt, gdt);
    sink.add(s.a, ga);
    sink.add(s.b, gb);
    sink.add(s.c, gc);
    sink.add(s.d, gd);
}

// ---------------------------------------------------------------------------
// forward rules

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value()).expect("tape shapes are valid")
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, kind: OpKind, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        self.tape.push(kind, shape, value, &[self.id], op)
    }

    fn binary(self, other: Var<'t>, kind: OpKind, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape_err(kind.name(), &[&a.shape, &b.shape]));
            }
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        };
        self.tape.push(kind, shape, value, &[self.id, other.id], op)
    }

    /// (m×k)·(k×n)
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (m, k, n, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", &[&a.shape, &b.shape]));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            matmul_acc(&a.value, &b.value, &mut out, m, k, n);
            (m, k, n, out)
        };
        let op = Op::MatMul { a: self.id, b: other.id, m, k, n };
        self.tape.push(OpKind::MatMul, vec![m, n], value, &[self.id, other.id], op)
    }

    /// 3×3 convolution with zero padding 1 on a C×H×W map; weight O×C×3×3.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (geom, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let ok = x.shape.len() == 3
                && w.shape.len() == 4
                && w.shape[1] == x.shape[0]
                && w.shape[2] == 3
                && w.shape[3] == 3
                && stride >= 1;
            if !ok {
                return Err(shape_err("conv2d_3x3_pad1", &[&x.shape, &w.shape]));
            }
            let (c, h, wd, o) = (x.shape[0], x.shape[1], x.shape[2], w.shape[0]);
            if let Some(b) = bias {
                if nodes[b.id].shape != [o] {
                    return Err(shape_err("conv2d_3x3_pad1", &[&w.shape, &nodes[b.id].shape]));
                }
            }
            let geom = ConvGeom {
                c,
                h,
                w: wd,
                o,
                ho: (h - 1) / stride + 1,
                wo: (wd - 1) / stride + 1,
                stride,
            };
            let bvals = bias.map(|b| nodes[b.id].value.as_slice());
            (geom, conv_forward(&x.value, &w.value, bvals, geom))
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Conv {
            x: self.id,
            w: weight.id,
            bias: bias.map(|b| b.id),
            geom,
        };
        self.tape
            .push(OpKind::Conv2d3x3Pad1, vec![geom.o, geom.ho, geom.wo], value, &inputs, op)
    }

    /// Per-pixel linear map over channels: C×H×W with weight O×C → O×H×W.
    pub fn pointwise_conv(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (c, o, hw, h, w, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt) = (&nodes[self.id], &nodes[weight.id]);
            if x.shape.len() != 3 || wt.shape.len() != 2 || wt.shape[1] != x.shape[0] {
                return Err(shape_err("pointwise_conv", &[&x.shape, &wt.shape]));
            }
            let (c, h, w, o) = (x.shape[0], x.shape[1], x.shape[2], wt.shape[0]);
            let hw = h * w;
            let mut out = vec![0.0; o * hw];
            if let Some(b) = bias {
                let bv = &nodes[b.id];
                if bv.shape != [o] {
                    return Err(shape_err("pointwise_conv", &[&wt.shape, &bv.shape]));
                }
                for oc in 0..o {
                    out[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = bv.value[oc]);
                }
            }
            matmul_acc(&wt.value, &x.value, &mut out, o, c, hw);
            (c, o, hw, h, w, out)
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Pointwise {
            x: self.id,
            w: weight.id,
            bias: bias.map(|b| b.id),
            c,
            o,
            hw,
        };
        self.tape.push(OpKind::PointwiseConv, vec![o, h, w], value, &inputs, op)
    }

    /// Normalizes over the last dimension, with optional affine parameters.
    pub fn layer_norm(self, gamma: Option<Var<'t>>, beta: Option<Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let (shape, cols, xhat, rstd, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap();
            for p in [gamma, beta].into_iter().flatten() {
                if nodes[p.id].shape != [cols] {
                    return Err(shape_err("layer_norm", &[&x.shape, &nodes[p.id].shape]));
                }
            }
            let rows = x.value.len() / cols;
            let mut xhat = vec![0.0; x.value.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.value[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..cols {
                    xhat[r * cols + j] = (row[j] - mean) * rs;
                }
            }
            let mut y = xhat.clone();
            if let Some(g) = gamma {
                let gv = &nodes[g.id].value;
                y.iter_mut().enumerate().for_each(|(i, v)| *v *= gv[i % cols]);
            }
            if let Some(b) = beta {
                let bv = &nodes[b.id].value;
                y.iter_mut().enumerate().for_each(|(i, v)| *v += bv[i % cols]);
            }
            (x.shape.clone(), cols, xhat, rstd, y)
        };
        let mut inputs = vec![self.id];
        inputs.extend(gamma.map(|g| g.id));
        inputs.extend(beta.map(|b| b.id));
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.map(|g| g.id),
            beta: beta.map(|b| b.id),
            cols,
            xhat,
            rstd,
        };
        self.tape.push(OpKind::LayerNorm, shape, value, &inputs, op)
    }

    pub fn softmax_last_dim(self) -> Result<Var<'t>> {
        let (shape, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap();
            let mut y = vec![0.0; x.value.len()];
            for r in 0..x.value.len() / cols {
                let row = &x.value[r * cols..(r + 1) * cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..cols {
                    let e = (row[j] - mx).exp();
                    y[r * cols + j] = e;
                    z += e;
                }
                y[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= z);
            }
            (x.shape.clone(), cols, y)
        };
        self.tape
            .push(OpKind::SoftmaxLastDim, shape, value, &[self.id], Op::Softmax { x: self.id, cols })
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(OpKind::Softplus, softplus, Op::Softplus { x: self.id })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(OpKind::Exp, f64::exp, Op::Exp { x: self.id })
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(OpKind::Log, f64::ln, Op::Log { x: self.id })
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(OpKind::Silu, |x| x * sigmoid(x), Op::Silu { x: self.id })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Add, |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Sub, |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Mul, |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(OpKind::ScalarScale, |v| v * c, Op::Scale { x: self.id, c })
    }

    /// Multiplies by a single-element tensor.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, sv) = (&nodes[self.id], &nodes[s.id]);
            if sv.value.len() != 1 {
                return Err(shape_err("scalar_scale", &[&x.shape, &sv.shape]));
            }
            (x.shape.clone(), x.value.iter().map(|v| v * sv.value[0]).collect())
        };
        let op = Op::ScaleBy { x: self.id, s: s.id };
        self.tape.push(OpKind::ScalarScale, shape, value, &[self.id, s.id], op)
    }

    fn channel_layout(&self, other: &Var<'t>, axis: usize, kind: OpKind) -> Result<(usize, usize)> {
        let nodes = self.tape.nodes.borrow();
        let (x, v) = (&nodes[self.id], &nodes[other.id]);
        if axis >= x.shape.len() || v.shape != [x.shape[axis]] {
            return Err(shape_err(kind.name(), &[&x.shape, &v.shape]));
        }
        Ok((x.shape[axis], x.shape[axis + 1..].iter().product()))
    }

    /// Adds a vector broadcast along `axis`.
    pub fn add_channel(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (ch, inner) = self.channel_layout(&bias, axis, OpKind::ChannelBias)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let v = x.value.iter().enumerate().map(|(i, v)| v + b.value[(i / inner) % ch]).collect();
            (x.shape.clone(), v)
        };
        let op = Op::ChannelBias { x: self.id, b: bias.id, ch, inner };
        self.tape.push(OpKind::ChannelBias, shape, value, &[self.id, bias.id], op)
    }

    /// Multiplies by a vector broadcast along `axis`.
    pub fn mul_channel(self, s: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(&s);
        let (ch, inner) = self.channel_layout(&s, axis, OpKind::ChannelScale)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, sv) = (&nodes[self.id], &nodes[s.id]);
            let v = x.value.iter().enumerate().map(|(i, v)| v * sv.value[(i / inner) % ch]).collect();
            (x.shape.clone(), v)
        };
        let op = Op::ChannelScale { x: self.id, s: s.id, ch, inner };
        self.tape.push(OpKind::ChannelScale, shape, value, &[self.id, s.id], op)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.with_value(|v| v.iter().sum());
        self.tape.push(OpKind::Sum, vec![1], vec![total], &[self.id], Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let m = self.with_value(|v| v.iter().sum::<f64>() / v.len() as f64);
        self.tape.push(OpKind::Mean, vec![1], vec![m], &[self.id], Op::Mean { x: self.id })
    }

    fn reduce_last(self, scale_by_len: bool) -> Result<Var<'t>> {
        let (shape, cols, scale, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap();
            let scale = if scale_by_len { 1.0 / cols as f64 } else { 1.0 };
            let mut shape = x.shape[..x.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            let v = x.value.chunks(cols).map(|r| r.iter().sum::<f64>() * scale).collect();
            (shape, cols, scale, v)
        };
        let op = Op::SumLast { x: self.id, cols, scale };
        self.tape.push(OpKind::SumLastDim, shape, value, &[self.id], op)
    }

    pub fn sum_last_dim(self) -> Result<Var<'t>> {
        self.reduce_last(false)
    }

    pub fn mean_last_dim(self) -> Result<Var<'t>> {
        self.reduce_last(true)
    }

    pub fn transpose_2d(self) -> Result<Var<'t>> {
        let (r, c, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 2 {
                return Err(shape_err("transpose_2d", &[&x.shape]));
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    y[j * r + i] = x.value[i * c + j];
                }
            }
            (r, c, y)
        };
        let op = Op::Transpose { x: self.id, r, c };
        self.tape.push(OpKind::Transpose2d, vec![c, r], value, &[self.id], op)
    }

    /// `out[i] = self.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(self, idx: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if numel(&shape) != idx.len() || idx.iter().any(|&i| i >= x.value.len()) {
                return Err(shape_err("gather_sequence", &[&x.shape, &shape]));
            }
            idx.iter().map(|&i| x.value[i]).collect()
        };
        let op = Op::Gather { x: self.id, idx };
        self.tape.push(OpKind::GatherSequence, shape, value, &[self.id], op)
    }

    /// Contiguous slice `[start, start+len)` of the flattened values.
    pub fn slice(self, start: usize, len: usize, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let idx: Rc<[usize]> = (start..start + len).collect();
        self.gather(idx, shape)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let (old, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(shape_err("reshape", &[&old, &shape]));
        }
        self.tape
            .push(OpKind::Reshape, shape, value, &[self.id], Op::Reshape { x: self.id })
    }

    /// Scales each row (last dimension) to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let (shape, cols, norms, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap();
            let mut norms = Vec::with_capacity(x.value.len() / cols);
            let mut y = Vec::with_capacity(x.value.len());
            for row in x.value.chunks(cols) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::NonFinite {
                        op: "l2_normalize".into(),
                    });
                }
                norms.push(n);
                y.extend(row.iter().map(|v| v / n));
            }
            (x.shape.clone(), cols, norms, y)
        };
        let op = Op::L2Normalize { x: self.id, cols, norms };
        self.tape.push(OpKind::L2Normalize, shape, value, &[self.id], op)
    }
}

/// Concatenates along the first axis; trailing extents must agree.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let tape = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?.tape;
    let (shape, value) = {
        let nodes = tape.nodes.borrow();
        let first = &nodes[parts[0].id].shape;
        let mut lead = 0;
        let mut value = Vec::new();
        for p in parts {
            assert!(std::ptr::eq(tape, p.tape), "vars from different tapes");
            let s = &nodes[p.id].shape;
            if s.len() != first.len() || s[1..] != first[1..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].shape.as_slice()).collect();
                return Err(shape_err("concat_channels", &shapes));
            }
            lead += s[0];
            value.extend_from_slice(&nodes[p.id].value);
        }
        let mut shape = first.clone();
        shape[0] = lead;
        (shape, value)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(OpKind::ConcatChannels, shape, value, &ids, Op::Concat { parts: ids.clone() })
}

/// Inputs to [`selective_scan`]: sequence length L, channels D, state N.
pub struct ScanInputs<'t> {
    /// L×D
    pub x: Var<'t>,
    /// L×D, positive
    pub dt: Var<'t>,
    /// D×N, negative
    pub a: Var<'t>,
    /// L×N
    pub b: Var<'t>,
    /// L×N
    pub c: Var<'t>,
    /// D
    pub d_skip: Var<'t>,
}

/// Discretized selective scan:
/// `h_l = exp(Δ_l ⊗ A) ⊙ h_{l-1} + (Δ_l ⊗ B_l) x_l`, `y_l = ⟨C_l, h_l⟩ + D ⊙ x_l`, `h_0 = 0`.
pub fn selective_scan<'t>(inp: ScanInputs<'t>) -> Result<Var<'t>> {
    let tape = inp.x.tape;
    let ids = [inp.x.id, inp.dt.id, inp.a.id, inp.b.id, inp.c.id, inp.d_skip.id];
    let (len, dim, ns, value, states) = {
        let nodes = tape.nodes.borrow();
        let sh = |i: usize| nodes[ids[i]].shape.as_slice();
        let (len, dim) = match sh(0) {
            [l, d] => (*l, *d),
            _ => return Err(shape_err("selective_scan", &[sh(0)])),
        };
        let ns = sh(2).get(1).copied().unwrap_or(0);
        let ok = sh(1) == [len, dim] && sh(2) == [dim, ns] && sh(3) == [len, ns] && sh(4) == [len, ns] && sh(5) == [dim];
        if !ok {
            let all: Vec<&[usize]> = (0..6).map(sh).collect();
            return Err(shape_err("selective_scan", &all));
        }
        let v = |i: usize| nodes[ids[i]].value.as_slice();
        let (x, dt, a, b, c, dsk) = (v(0), v(1), v(2), v(3), v(4), v(5));
        let mut h = vec![0.0; dim * ns];
        let mut states = vec![0.0; len * dim * ns];
        let mut y = vec![0.0; len * dim];
        for l in 0..len {
            for d in 0..dim {
                let dv = dt[l * dim + d];
                let xv = x[l * dim + d];
                let mut acc = 0.0;
                for n in 0..ns {
                    let k = d * ns + n;
                    let hv = (dv * a[k]).exp() * h[k] + dv * b[l * ns + n] * xv;
                    h[k] = hv;
                    acc += c[l * ns + n] * hv;
                }
                y[l * dim + d] = acc + dsk[d] * xv;
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("selective_scan at position {l}"),
                });
            }
            states[l * dim * ns..(l + 1) * dim * ns].copy_from_slice(&h);
        }
        (len, dim, ns, y, states)
    };
    let saved = ScanSaved {
        x: ids[0],
        dt: ids[1],
        a: ids[2],
        b: ids[3],
        c: ids[4],
        d: ids[5],
        len,
        dim,
        n_state: ns,
        states,
    };
    tape.push(OpKind::SelectiveScan, vec![len, dim], value, &ids, Op::Scan(Box::new(saved)))
}
