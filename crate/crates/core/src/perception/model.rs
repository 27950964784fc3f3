use crate::error::{Error, Result};
use crate::numcore::{concat, Bound, ParamId, ParamStore, Rng, Tape, Tensor, Var};

use super::losses::{dose_score, dose_score_var};

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionDims {
    pub widths: [usize; 4],
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for PerceptionDims {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128], hidden: 64, embed_dim: 32 }
    }
}

/// Input channel 0: the image shifted so soft tissue sits near 0.
pub const INPUT_SHIFT: f64 = 1.0 / 3.0;
pub const INPUT_SCALE: f64 = 5.0;
/// Input channel 1: the image minus its 3×3 box mean, scaled so that dose
/// noise has roughly unit spread.
pub const DETAIL_SCALE: f64 = 100.0;

pub const INPUT_CHANNELS: usize = 3;

/// Encoder input (flattened 3×size×size): shifted image, detail, log detail energy.
pub fn encoder_input(img: &[f64], size: usize) -> Vec<f64> {
    let mut out: Vec<f64> = img.iter().map(|x| (x - INPUT_SHIFT) * INPUT_SCALE).collect();
    out.reserve(2 * img.len());
    for i in 0..size {
        for j in 0..size {
            let mut acc = 0.0;
            for di in [-1isize, 0, 1] {
                for dj in [-1isize, 0, 1] {
                    let r = (i as isize + di).clamp(0, size as isize - 1) as usize;
                    let c = (j as isize + dj).clamp(0, size as isize - 1) as usize;
                    acc += img[r * size + c];
                }
            }
            out.push((img[i * size + j] - acc / 9.0) * DETAIL_SCALE);
        }
    }
    let energy: Vec<f64> = out[size * size..].iter().map(|r| (r * r + 1e-2).ln()).collect();
    out.extend(energy);
    out
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Small CNN encoder with a dose head, an anatomy head and the two learnable
/// anchor embeddings used by the dose score.
#[derive(Clone, Debug)]
pub struct PerceptionModel {
    pub dims: PerceptionDims,
    pub params: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
    dose_head: Mlp,
    anatomy_head: Mlp,
    /// 2×d_e: clean anchor then noisy anchor.
    anchors: ParamId,
}

/// Embeddings and dose score for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionOutput {
    pub e_d: Vec<f64>,
    pub e_a: Vec<f64>,
    pub y_hat: f64,
}

/// Batch forward results recorded on a tape.
pub struct Encoded<'t> {
    /// n×d_e, unit rows
    pub e_d: Var<'t>,
    /// n×d_e, unit rows
    pub e_a: Var<'t>,
    /// n
    pub y_hat: Var<'t>,
}

fn he(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl PerceptionModel {
    pub fn new(dims: PerceptionDims, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, &w) in dims.widths.iter().enumerate() {
            let wt = params.add(format!("enc.{i}.weight"), he(rng, vec![w, cin, 3, 3], cin * 9));
            let b = params.add(format!("enc.{i}.bias"), Tensor::zeros(vec![w]));
            convs.push((wt, b));
            cin = w;
        }
        let feat = dims.widths[3];
        let mut head = |name: &str, params: &mut ParamStore| Mlp {
            w1: params.add(format!("{name}.0.weight"), he(rng, vec![feat, dims.hidden], feat)),
            b1: params.add(format!("{name}.0.bias"), Tensor::zeros(vec![dims.hidden])),
            w2: params.add(format!("{name}.1.weight"), he(rng, vec![dims.hidden, dims.embed_dim], dims.hidden)),
            b2: params.add(format!("{name}.1.bias"), Tensor::zeros(vec![dims.embed_dim])),
        };
        let dose_head = head("dose_head", &mut params);
        let anatomy_head = head("anatomy_head", &mut params);
        // opposite directions so the anchors start far from collinear
        let a = Tensor::randn(vec![dims.embed_dim], 1.0, rng);
        let norm = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut both: Vec<f64> = a.values().iter().map(|v| v / norm).collect();
        both.extend(a.values().iter().map(|v| -v / norm));
        let anchors = params.add("anchors", Tensor::new(vec![2, dims.embed_dim], both).unwrap());
        Self { dims, params, convs, dose_head, anatomy_head, anchors }
    }

    /// Rebuilds the parameter layout for `dims` and loads values by name.
    pub fn from_params(dims: PerceptionDims, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(dims, &mut Rng::new(0));
        m.params.load_from(params).map_err(Error::Format)?;
        Ok(m)
    }

    pub fn anchors(&self) -> (&[f64], &[f64]) {
        let v = self.params.get(self.anchors).values();
        v.split_at(self.dims.embed_dim)
    }

    fn pooled<'t>(&self, p: &Bound<'t>, img: Var<'t>) -> Result<Var<'t>> {
        let mut x = img;
        for (layer, &(w, b)) in self.convs.iter().enumerate() {
            x = x
                .conv2d(p[w], Some(p[b]), 2)
                .and_then(Var::silu)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFinite { op: format!("encoder layer {layer}: {op}") },
                    e => e,
                })?;
        }
        let s = x.shape();
        x.reshape(vec![s[0], s[1] * s[2]])?.mean_last_dim()?.reshape(vec![1, s[0]])
    }

    fn head<'t>(&self, p: &Bound<'t>, h: &Mlp, feats: Var<'t>) -> Result<Var<'t>> {
        feats
            .matmul(p[h.w1])?
            .add_channel(p[h.b1], 1)?
            .silu()?
            .matmul(p[h.w2])?
            .add_channel(p[h.b2], 1)?
            .l2_normalize()
    }

    /// Forward pass over square images of side `size` (values in `[0, 1]`).
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &[&[f64]], size: usize) -> Result<Encoded<'t>> {
        if size < 16 {
            return Err(Error::invalid(format!("image side {size} below 16")));
        }
        let feats = images
            .iter()
            .map(|img| {
                let x = tape.constant(vec![INPUT_CHANNELS, size, size], encoder_input(img, size))?;
                self.pooled(p, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = concat(&feats)?;
        let e_d = self.head(p, &self.dose_head, feats)?;
        let e_a = self.head(p, &self.anatomy_head, feats)?;
        let y_hat = dose_score_var(e_d, p[self.anchors])?;
        Ok(Encoded { e_d, e_a, y_hat })
    }

    /// Inference without gradients.
    pub fn encode(&self, images: &[&[f64]], size: usize) -> Result<Vec<PerceptionOutput>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, &tape, images, size)?;
        let d = self.dims.embed_dim;
        let (e_d, e_a) = (out.e_d.value(), out.e_a.value());
        let (clean, noisy) = self.anchors();
        Ok((0..images.len())
            .map(|i| {
                let ed = e_d[i * d..(i + 1) * d].to_vec();
                let y_hat = dose_score(&ed, clean, noisy);
                PerceptionOutput { e_d: ed, e_a: e_a[i * d..(i + 1) * d].to_vec(), y_hat }
            })
            .collect())
    }
}
