//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are errors, and [`RunConfig::to_text`]
//! writes every key so that parsing its output gives back the same config.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use founddiff::ctsim::{dose_label, parse_dose, Anatomy, Exposure, DOSE_MENU, PHOTON_FLOOR, SEEN_DOSES, UNSEEN_DOSES};
use founddiff::dadiff::{DacbVariant, DenoiserConfig};
use founddiff::diffusion::DenoiserTrainConfig;
use founddiff::perception::{OptimizerKind, PerceptionDims, PerceptionTrainConfig};

/// A config problem, naming the offending key when there is one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        Self { key: Some(key.to_string()), message: message.into() }
    }
}

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // simulation
    pub size: usize,
    pub n0: f64,
    pub exposure: Exposure,
    /// Projection views; 0 picks the default for the image size.
    pub views: usize,
    pub families: Vec<Anatomy>,
    pub fractions: Vec<f64>,
    pub n_per_cell: usize,
    pub seen_fractions: Vec<f64>,
    pub unseen_fractions: Vec<f64>,

    // paths
    pub dataset: PathBuf,
    pub test_dataset: PathBuf,
    pub perception_checkpoint: PathBuf,
    pub denoiser_checkpoint: PathBuf,
    /// Dataset directory or single sample file for `denoise`.
    pub input: PathBuf,

    // perception
    pub tau: f64,
    pub encoder_widths: [usize; 4],
    pub head_hidden: usize,
    pub d_e: usize,
    pub perception_epochs: usize,
    pub perception_batch: usize,
    pub perception_optimizer: OptimizerKind,
    pub perception_lr: f64,
    pub perception_lr_min: f64,
    pub momentum: f64,
    pub perception_weight_decay: f64,
    pub crop_area: f64,
    pub perception_clip: f64,

    // denoiser
    pub levels: usize,
    pub widths: Vec<usize>,
    pub n_state: usize,
    pub scan_directions: usize,
    pub variant: DacbVariant,
    pub diffusion_steps: usize,
    pub eta: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Square training patch side; 0 trains on full images.
    pub patch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub resume: bool,

    // sampling and verification
    pub sample_steps: usize,
    pub stochastic_init: bool,
    pub verify_quick: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PerceptionTrainConfig::default();
        let d = DenoiserTrainConfig::default();
        Self {
            seed: 0,
            size: 64,
            n0: 1e5,
            exposure: Exposure::Auto,
            views: 0,
            families: Anatomy::ALL.to_vec(),
            fractions: DOSE_MENU.to_vec(),
            n_per_cell: 40,
            seen_fractions: SEEN_DOSES.to_vec(),
            unseen_fractions: UNSEEN_DOSES.to_vec(),
            dataset: "data/train".into(),
            test_dataset: "data/test".into(),
            perception_checkpoint: "runs/perception/perception.dacp".into(),
            denoiser_checkpoint: "runs/denoiser/denoiser.dadf".into(),
            input: "data/test".into(),
            tau: p.tau,
            encoder_widths: p.dims.widths,
            head_hidden: p.dims.hidden,
            d_e: p.dims.embed_dim,
            perception_epochs: p.epochs,
            perception_batch: p.batch_images,
            perception_optimizer: p.optimizer,
            perception_lr: p.lr_max,
            perception_lr_min: p.lr_min,
            momentum: p.momentum,
            perception_weight_decay: p.weight_decay,
            crop_area: p.crop_area,
            perception_clip: p.clip_norm,
            levels: d.net.widths.len(),
            widths: d.net.widths.clone(),
            n_state: d.net.n_state,
            scan_directions: d.net.scan_directions,
            variant: d.net.variant,
            diffusion_steps: d.steps,
            eta: d.eta,
            iterations: d.iterations,
            batch: d.batch,
            patch: d.patch,
            lr: d.lr_max,
            lr_min: d.lr_min,
            warmup: d.warmup,
            beta1: d.beta1,
            beta2: d.beta2,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
            resume: false,
            sample_steps: 2,
            stochastic_init: false,
            verify_quick: false,
        }
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::at(key, format!("cannot parse `{value}`")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}

fn doses(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_dose(v).map_err(|e| ConfigError::at(key, e.to_string())))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::at(key, format!("expected true or false, got `{value}`"))),
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_doses(v: &[f64]) -> String {
    v.iter().map(|&f| dose_label(f)).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its serialized value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &PathBuf| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("size", self.size.to_string()),
            ("n0", self.n0.to_string()),
            ("exposure", self.exposure.name().to_string()),
            ("views", self.views.to_string()),
            ("families", join(&self.families)),
            ("fractions", join_doses(&self.fractions)),
            ("n_per_cell", self.n_per_cell.to_string()),
            ("seen_fractions", join_doses(&self.seen_fractions)),
            ("unseen_fractions", join_doses(&self.unseen_fractions)),
            ("dataset", path(&self.dataset)),
            ("test_dataset", path(&self.test_dataset)),
            ("perception_checkpoint", path(&self.perception_checkpoint)),
            ("denoiser_checkpoint", path(&self.denoiser_checkpoint)),
            ("input", path(&self.input)),
            ("tau", self.tau.to_string()),
            ("encoder_widths", join(&self.encoder_widths)),
            ("head_hidden", self.head_hidden.to_string()),
            ("d_e", self.d_e.to_string()),
            ("perception_epochs", self.perception_epochs.to_string()),
            ("perception_batch", self.perception_batch.to_string()),
            ("perception_optimizer", self.perception_optimizer.name().to_string()),
            ("perception_lr", self.perception_lr.to_string()),
            ("perception_lr_min", self.perception_lr_min.to_string()),
            ("momentum", self.momentum.to_string()),
            ("perception_weight_decay", self.perception_weight_decay.to_string()),
            ("crop_area", self.crop_area.to_string()),
            ("perception_clip", self.perception_clip.to_string()),
            ("levels", self.levels.to_string()),
            ("widths", join(&self.widths)),
            ("n_state", self.n_state.to_string()),
            ("scan_directions", self.scan_directions.to_string()),
            ("variant", self.variant.name().to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("eta", self.eta.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch", self.batch.to_string()),
            ("patch", self.patch.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("warmup", self.warmup.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("resume", self.resume.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("stochastic_init", self.stochastic_init.to_string()),
            ("verify_quick", self.verify_quick.to_string()),
        ]
    }

    /// Sets one key from its text form. Validation across keys happens in
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = scalar(key, v)?,
            "size" => self.size = scalar(key, v)?,
            "n0" => self.n0 = scalar(key, v)?,
            "exposure" => self.exposure = Exposure::parse(v).map_err(|e| ConfigError::at(key, e.to_string()))?,
            "views" => self.views = scalar(key, v)?,
            "families" => self.families = list(key, v)?,
            "fractions" => self.fractions = doses(key, v)?,
            "n_per_cell" => self.n_per_cell = scalar(key, v)?,
            "seen_fractions" => self.seen_fractions = doses(key, v)?,
            "unseen_fractions" => self.unseen_fractions = doses(key, v)?,
            "dataset" => self.dataset = v.into(),
            "test_dataset" => self.test_dataset = v.into(),
            "perception_checkpoint" => self.perception_checkpoint = v.into(),
            "denoiser_checkpoint" => self.denoiser_checkpoint = v.into(),
            "input" => self.input = v.into(),
            "tau" => self.tau = scalar(key, v)?,
            "encoder_widths" => {
                let w: Vec<usize> = list(key, v)?;
                self.encoder_widths = w.try_into().map_err(|_| ConfigError::at(key, "expected four widths"))?;
            }
            "head_hidden" => self.head_hidden = scalar(key, v)?,
            "d_e" => self.d_e = scalar(key, v)?,
            "perception_epochs" => self.perception_epochs = scalar(key, v)?,
            "perception_batch" => self.perception_batch = scalar(key, v)?,
            "perception_optimizer" => {
                self.perception_optimizer = OptimizerKind::parse(v).map_err(|e| ConfigError::at(key, e.to_string()))?
            }
            "perception_lr" => self.perception_lr = scalar(key, v)?,
            "perception_lr_min" => self.perception_lr_min = scalar(key, v)?,
            "momentum" => self.momentum = scalar(key, v)?,
            "perception_weight_decay" => self.perception_weight_decay = scalar(key, v)?,
            "crop_area" => self.crop_area = scalar(key, v)?,
            "perception_clip" => self.perception_clip = scalar(key, v)?,
            "levels" => self.levels = scalar(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "n_state" => self.n_state = scalar(key, v)?,
            "scan_directions" => self.scan_directions = scalar(key, v)?,
            "variant" => {
                self.variant = DacbVariant::parse(v)
                    .ok_or_else(|| ConfigError::at(key, format!("unknown variant `{v}` (full, dose-only, anatomy-only)")))?
            }
            "diffusion_steps" => self.diffusion_steps = scalar(key, v)?,
            "eta" => self.eta = scalar(key, v)?,
            "iterations" => self.iterations = scalar(key, v)?,
            "batch" => self.batch = scalar(key, v)?,
            "patch" => self.patch = scalar(key, v)?,
            "lr" => self.lr = scalar(key, v)?,
            "lr_min" => self.lr_min = scalar(key, v)?,
            "warmup" => self.warmup = scalar(key, v)?,
            "beta1" => self.beta1 = scalar(key, v)?,
            "beta2" => self.beta2 = scalar(key, v)?,
            "weight_decay" => self.weight_decay = scalar(key, v)?,
            "clip_norm" => self.clip_norm = scalar(key, v)?,
            "resume" => self.resume = boolean(key, v)?,
            "sample_steps" => self.sample_steps = scalar(key, v)?,
            "stochastic_init" => self.stochastic_init = boolean(key, v)?,
            "verify_quick" => self.verify_quick = boolean(key, v)?,
            _ => return Err(ConfigError::at(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                key: None,
                message: format!("line {}: expected `key = value`", lineno + 1),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::at(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: usize| if v == 0 { Err(ConfigError::at(key, "must be positive")) } else { Ok(()) };
        let positive_f = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 { Ok(()) } else { Err(ConfigError::at(key, "must be a positive number")) }
        };
        let unit = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) { Ok(()) } else { Err(ConfigError::at(key, "must lie in [0, 1)")) }
        };
        if self.size < 16 {
            return Err(ConfigError::at("size", "must be at least 16"));
        }
        positive_f("n0", self.n0)?;
        if self.families.is_empty() {
            return Err(ConfigError::at("families", "needs at least one family"));
        }
        for (key, menu) in [
            ("fractions", &self.fractions),
            ("seen_fractions", &self.seen_fractions),
            ("unseen_fractions", &self.unseen_fractions),
        ] {
            if menu.is_empty() {
                return Err(ConfigError::at(key, "needs at least one dose fraction"));
            }
            for &f in menu {
                if self.n0 * f < PHOTON_FLOOR {
                    return Err(ConfigError::at(key, format!("n0 * {} is below the photon floor {PHOTON_FLOOR}", dose_label(f))));
                }
            }
        }
        if self.seen_fractions.iter().any(|f| self.unseen_fractions.contains(f)) {
            return Err(ConfigError::at("unseen_fractions", "overlaps seen_fractions"));
        }
        positive("n_per_cell", self.n_per_cell)?;
        positive_f("tau", self.tau)?;
        if self.encoder_widths.contains(&0) {
            return Err(ConfigError::at("encoder_widths", "must be positive"));
        }
        positive("head_hidden", self.head_hidden)?;
        positive("d_e", self.d_e)?;
        positive("perception_batch", self.perception_batch)?;
        positive_f("perception_lr", self.perception_lr)?;
        positive_f("perception_lr_min", self.perception_lr_min)?;
        unit("momentum", self.momentum)?;
        if !(self.crop_area > 0.0 && self.crop_area <= 1.0) {
            return Err(ConfigError::at("crop_area", "must lie in (0, 1]"));
        }
        if self.widths.len() != self.levels {
            return Err(ConfigError::at("levels", format!("is {} but widths lists {}", self.levels, self.widths.len())));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.widths[0] % 2 != 0 {
            return Err(ConfigError::at("widths", "must be nonempty, positive, and the first even"));
        }
        let down = 1usize << (self.levels - 1);
        if self.size % down != 0 {
            return Err(ConfigError::at("size", format!("must be divisible by {down} for {} levels", self.levels)));
        }
        if self.patch != 0 && (self.patch > self.size || self.patch % down != 0) {
            return Err(ConfigError::at("patch", format!("must be 0 or a multiple of {down} no larger than size")));
        }
        positive("n_state", self.n_state)?;
        if ![1, 2, 4].contains(&self.scan_directions) {
            return Err(ConfigError::at("scan_directions", "must be 1, 2 or 4"));
        }
        positive("diffusion_steps", self.diffusion_steps)?;
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(ConfigError::at("eta", "must be a non-negative number"));
        }
        positive("batch", self.batch)?;
        positive_f("lr", self.lr)?;
        positive_f("lr_min", self.lr_min)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            return Err(ConfigError::at("sample_steps", "must lie in 1..=diffusion_steps"));
        }
        Ok(())
    }

    pub fn perception_train(&self) -> PerceptionTrainConfig {
        PerceptionTrainConfig {
            dims: self.perception_dims(),
            tau: self.tau,
            batch_images: self.perception_batch,
            epochs: self.perception_epochs,
            optimizer: self.perception_optimizer,
            lr_max: self.perception_lr,
            lr_min: self.perception_lr_min,
            momentum: self.momentum,
            weight_decay: self.perception_weight_decay,
            crop_area: self.crop_area,
            clip_norm: self.perception_clip,
        }
    }

    pub fn perception_dims(&self) -> PerceptionDims {
        PerceptionDims { widths: self.encoder_widths, hidden: self.head_hidden, embed_dim: self.d_e }
    }

    pub fn denoiser_net(&self) -> DenoiserConfig {
        DenoiserConfig {
            widths: self.widths.clone(),
            n_state: self.n_state,
            d_e: self.d_e,
            scan_directions: self.scan_directions,
            variant: self.variant,
        }
    }

    pub fn denoiser_train(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            net: self.denoiser_net(),
            steps: self.diffusion_steps,
            eta: self.eta,
            iterations: self.iterations,
            batch: self.batch,
            patch: self.patch,
            lr_max: self.lr,
            lr_min: self.lr_min,
            warmup: self.warmup,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}
