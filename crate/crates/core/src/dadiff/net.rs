//! Conditional U-Net predicting the residual `I_ld − I_nd`.

use std::rc::Rc;

use super::blocks::{Condition, Dacb, DacbDims, DacbVariant, InitMode, Rleb};
use super::embed::timestep_embed;
use super::layers::{he_std, Conv3, Pointwise};
use crate::error::{Error, Result};
use crate::numcore::{concat, Bound, ParamStore, Rng, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Channel width per level; the first is also the timestep-embedding size.
    pub widths: Vec<usize>,
    pub n_state: usize,
    pub d_e: usize,
    /// 1, 2 or 4 scan directions in the selective-scan branch.
    pub scan_directions: usize,
    pub variant: DacbVariant,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64], n_state: 4, d_e: 32, scan_directions: 4, variant: DacbVariant::Full }
    }
}

#[derive(Clone, Debug)]
struct Level {
    rleb: Rleb,
    dacb: Dacb,
}

#[derive(Clone, Debug)]
struct Up {
    conv: Conv3,
    fuse: Pointwise,
    level: Level,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    input: Conv3,
    encoder: Vec<Level>,
    down: Vec<Conv3>,
    decoder: Vec<Up>,
    output: Conv3,
}

/// Nearest-neighbour upsampling index from an `h2×w2` map to `h×w`.
fn upsample_index(c: usize, h2: usize, w2: usize, h: usize, w: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                idx.push(ch * h2 * w2 + (i / 2) * w2 + j / 2);
            }
        }
    }
    idx.into()
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, mode: InitMode, rng: &mut Rng) -> Result<Self> {
        let w = &config.widths;
        if w.is_empty() || w.iter().any(|&c| c == 0) || w[0] % 2 != 0 {
            return Err(Error::invalid("widths must be nonempty, positive, and the first even"));
        }
        if ![1, 2, 4].contains(&config.scan_directions) {
            return Err(Error::invalid(format!("scan_directions must be 1, 2 or 4, got {}", config.scan_directions)));
        }
        if config.n_state == 0 || config.d_e == 0 {
            return Err(Error::invalid("n_state and d_e must be positive"));
        }
        let mut params = ParamStore::new();
        let t_dim = w[0];
        let dims = |c: usize| DacbDims {
            channels: c,
            t_dim,
            d_e: config.d_e,
            n_state: config.n_state,
            scan_directions: config.scan_directions,
        };
        let input = Conv3::new(&mut params, "input", 2, w[0], he_std(18), 1, rng);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for (i, &c) in w.iter().enumerate() {
            encoder.push(Level {
                rleb: Rleb::new(&mut params, &format!("enc{i}.rleb"), c, mode, rng),
                dacb: Dacb::new(&mut params, &format!("enc{i}.dacb"), dims(c), config.variant, mode, rng),
            });
            if i + 1 < w.len() {
                down.push(Conv3::new(&mut params, &format!("down{i}"), c, w[i + 1], he_std(9 * c), 2, rng));
            }
        }
        let mut decoder = Vec::new();
        for i in (0..w.len() - 1).rev() {
            let c = w[i];
            decoder.push(Up {
                conv: Conv3::new(&mut params, &format!("up{i}.conv"), w[i + 1], c, he_std(9 * w[i + 1]), 1, rng),
                fuse: Pointwise::new(&mut params, &format!("up{i}.fuse"), 2 * c, c, he_std(2 * c) / 2f64.sqrt(), true, rng),
                level: Level {
                    rleb: Rleb::new(&mut params, &format!("dec{i}.rleb"), c, mode, rng),
                    dacb: Dacb::new(&mut params, &format!("dec{i}.dacb"), dims(c), config.variant, mode, rng),
                },
            });
        }
        let output = Conv3::new(&mut params, "output", w[0], 1, 0.0, 1, rng);
        Ok(Self { config, params, input, encoder, down, decoder, output })
    }

    /// Rebuilds the layout for `config` and loads values by name.
    pub fn from_params(config: DenoiserConfig, params: &ParamStore) -> Result<Self> {
        let mut d = Self::new(config, InitMode::Zero, &mut Rng::new(0))?;
        if d.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, configuration expects {}",
                params.len(),
                d.params.len()
            )));
        }
        d.params.load_from(params).map_err(Error::Format)?;
        Ok(d)
    }

    /// Predicted residual for one `size × size` image pair.
    ///
    /// `e_d` and `e_a` are the frozen perception embeddings of `i_ld`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        i_t: &[f64],
        i_ld: &[f64],
        size: usize,
        t: usize,
        e_d: &[f64],
        e_a: &[f64],
    ) -> Result<Var<'t>> {
        let t_dim = self.config.widths[0];
        let cond = Condition {
            t_emb: tape.constant(vec![1, t_dim], timestep_embed(t, t_dim))?,
            e_d: tape.constant(vec![1, e_d.len()], e_d.to_vec())?,
            e_a: tape.constant(vec![1, e_a.len()], e_a.to_vec())?,
        };
        let mut x = i_t.to_vec();
        x.extend_from_slice(i_ld);
        let x = tape.constant(vec![2, size, size], x)?;
        self.forward_vars(p, x, cond)
    }

    /// Forward pass on a 2×H×W input (`I_t` then `I_ld`).
    pub fn forward_vars<'t>(&self, p: &Bound<'t>, x: Var<'t>, cond: Condition<'t>) -> Result<Var<'t>> {
        let mut f = self.input.forward(p, x)?;
        let mut skips = Vec::new();
        for (i, lvl) in self.encoder.iter().enumerate() {
            f = lvl.rleb.forward(p, f)?;
            f = lvl.dacb.forward(p, f, cond)?;
            if i < self.down.len() {
                skips.push(f);
                f = self.down[i].forward(p, f)?;
            }
        }
        for up in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let (s, ss) = (f.shape(), skip.shape());
            let idx = upsample_index(s[0], s[1], s[2], ss[1], ss[2]);
            f = f.gather(idx, vec![s[0], ss[1], ss[2]])?;
            f = up.conv.forward(p, f)?;
            f = up.fuse.forward(p, concat(&[f, skip])?)?;
            f = up.level.rleb.forward(p, f)?;
            f = up.level.dacb.forward(p, f, cond)?;
        }
        let s = f.shape();
        self.output.forward(p, f)?.reshape(vec![s[1], s[2]])
    }

    /// Residual prediction without gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(&self, i_t: &[f64], i_ld: &[f64], size: usize, t: usize, e_d: &[f64], e_a: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.forward(&p, &tape, i_t, i_ld, size, t, e_d, e_a)?.value())
    }
}
