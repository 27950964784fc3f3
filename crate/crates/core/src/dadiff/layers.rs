//! Parameterized building blocks shared by the denoiser.

use crate::error::Result;
use crate::numcore::{Bound, ParamId, ParamStore, Rng, Tensor, Var};

/// Dense layer on row vectors: `[rows, fan_in] → [rows, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init(vec![fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add_channel(p[b], 1),
            None => Ok(y),
        }
    }
}

/// 3×3 convolution with padding 1.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, stride: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init(vec![cout, cin, 3, 3], std, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Self { weight, bias, stride }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p[self.weight], self.bias.map(|b| p[b]), self.stride)
    }
}

/// Per-pixel channel map `C×H×W → O×H×W`.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init(vec![cout, cin], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.pointwise_conv(p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Gaussian init, or exact zeros when `std == 0`.
pub fn init(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    if std == 0.0 {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, std, rng)
    }
}

/// He-normal standard deviation for a given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Layer norm over channels at every pixel of a C×H×W map.
pub fn channel_layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    x.reshape(vec![c, hw])?
        .transpose_2d()?
        .layer_norm(Some(gamma), Some(beta), 1e-6)?
        .transpose_2d()?
        .reshape(s)
}
