//! The subcommands. Each writes its outputs and a copy of the config into
//! the output directory and never touches its inputs.

use std::cell::Cell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use founddiff::checkpoint::{self, DENOISER_MAGIC, PERCEPTION_MAGIC};
use founddiff::ctsim::{
    default_views, dose_label, export_pgm, make_dataset, read_dataset, read_manifest, read_sample, write_dataset, CtSample,
    DatasetSpec,
};
use founddiff::dadiff::{Denoiser, InitMode};
use founddiff::diffusion::{
    prepare_items, sample, train_denoiser, DiffusionSchedule, NetPredictor, ResidualPredictor, SamplerPlan,
};
use founddiff::metrics::{mean_std, psnr, ssim, MetricReport};
use founddiff::numcore::{inject_fault, OpKind, Rng};
use founddiff::perception::{embeddings_csv, eval_perception, train_perception, PerceptionModel, PerceptionOutput};
use founddiff::verify;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};

pub const PERCEPTION_FILE: &str = "perception.dacp";
pub const PERCEPTION_LOSS_FILE: &str = "perception_loss.csv";
pub const DENOISER_FILE: &str = "denoiser.dadf";
pub const DENOISER_LOSS_FILE: &str = "denoiser_loss.csv";
pub const DENOISE_LOG_FILE: &str = "denoise_log.csv";
pub const CONFIG_COPY: &str = "config.txt";
pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";

/// Per-cell denoiser metrics in the evaluation report.
pub const CELL_METRICS: [&str; 5] = ["psnr_ldct", "psnr", "ssim_ldct", "ssim", "dose_score"];
/// Per-split perception metrics in the evaluation report.
pub const SPLIT_METRICS: [&str; 3] = ["plcc", "srocc", "anatomy_acc"];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence { step: usize },
    VerifyFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence { .. } => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence { step } => write!(f, "training diverged at step {step}"),
            CliError::VerifyFailed(names) => write!(f, "verification failed: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<founddiff::Error> for CliError {
    fn from(e: founddiff::Error) -> Self {
        match e {
            founddiff::Error::Divergence { step } => CliError::Divergence { step },
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A parsed config together with the text it came from.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    /// The config file exactly as given, or the serialized defaults.
    pub source: String,
    pub out: PathBuf,
}

impl Run {
    /// Reads `config` (defaults when absent) and applies a seed override.
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: PathBuf) -> CliResult<Self> {
        let (mut cfg, source) = match config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                (RunConfig::parse(&text)?, text)
            }
            None => (RunConfig::default(), RunConfig::default().to_text()),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self { cfg, source, out })
    }

    fn prepare_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(CONFIG_COPY), &self.source)?;
        fs::write(self.out.join(EFFECTIVE_CONFIG), self.cfg.to_text())?;
        Ok(())
    }
}

fn require(path: &Path, key: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("config key `{key}`: {} does not exist", path.display())))
    }
}

fn load_perception(cfg: &RunConfig) -> CliResult<PerceptionModel> {
    require(&cfg.perception_checkpoint, "perception_checkpoint")?;
    let params = checkpoint::load(&cfg.perception_checkpoint, PERCEPTION_MAGIC)?;
    Ok(PerceptionModel::from_params(cfg.perception_dims(), &params)?)
}

fn load_denoiser(cfg: &RunConfig) -> CliResult<Denoiser> {
    require(&cfg.denoiser_checkpoint, "denoiser_checkpoint")?;
    let params = checkpoint::load(&cfg.denoiser_checkpoint, DENOISER_MAGIC)?;
    Ok(Denoiser::from_params(cfg.denoiser_net(), &params)?)
}

fn read_data(dir: &Path) -> CliResult<Vec<CtSample>> {
    read_dataset(dir).map_err(|e| CliError::Data(format!("reading dataset {}: {e}", dir.display())))
}

fn encode_all(model: &PerceptionModel, data: &[CtSample]) -> CliResult<Vec<PerceptionOutput>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let imgs: Vec<&[f64]> = chunk.iter().map(|s| s.ldct.as_slice()).collect();
        out.extend(model.encode(&imgs, chunk[0].size)?);
    }
    Ok(out)
}

pub fn simulate(run: &Run) -> CliResult<()> {
    let cfg = &run.cfg;
    let mut spec = DatasetSpec::new(cfg.families.clone(), cfg.fractions.clone(), cfg.n_per_cell, cfg.size, cfg.n0, cfg.seed);
    spec.exposure = cfg.exposure;
    spec.n_views = if cfg.views == 0 { default_views(cfg.size) } else { cfg.views };
    let samples = make_dataset(&spec)?;
    run.prepare_out()?;
    write_dataset(&run.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), run.out.display());
    Ok(())
}

pub fn train_perception_cmd(run: &Run) -> CliResult<()> {
    let cfg = &run.cfg;
    let data = read_data(&cfg.dataset)?;
    run.prepare_out()?;
    let (model, trace) = train_perception(&cfg.perception_train(), &data, &mut Rng::substream(cfg.seed, 1))?;
    checkpoint::save(&run.out.join(PERCEPTION_FILE), PERCEPTION_MAGIC, &model.params)?;
    let mut csv = String::from("epoch,total,dose,rank,anatomy\n");
    for (i, (t, p)) in trace.total.iter().zip(&trace.parts).enumerate() {
        let _ = writeln!(csv, "{i},{t},{},{},{}", p[0], p[1], p[2]);
    }
    fs::write(run.out.join(PERCEPTION_LOSS_FILE), csv)?;
    fs::write(run.out.join("embeddings.csv"), embeddings_csv(&model, &data)?)?;
    if let Some(last) = trace.total.last() {
        println!("perception trained for {} epochs, final loss {last:.4}", trace.total.len());
    }
    Ok(())
}

/// Number of rows in an existing loss trace, checking they are numbered 0..n.
fn loss_rows(path: &Path) -> CliResult<usize> {
    let text = fs::read_to_string(path)?;
    let mut n = 0;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: bad row `{line}`", path.display())))?;
        if step != n {
            return Err(CliError::Data(format!("{}: expected step {n}, found {step}", path.display())));
        }
        n += 1;
    }
    Ok(n)
}

pub fn train_denoiser_cmd(run: &Run) -> CliResult<()> {
    let cfg = &run.cfg;
    let perception = load_perception(cfg)?;
    let data: Vec<CtSample> =
        read_data(&cfg.dataset)?.into_iter().filter(|s| cfg.seen_fractions.contains(&s.dose)).collect();
    if data.is_empty() {
        return Err(CliError::Data(format!("{} has no samples at the seen fractions", cfg.dataset.display())));
    }
    let items = prepare_items(&perception, &data)?;
    let tcfg = cfg.denoiser_train();
    let ck_path = run.out.join(DENOISER_FILE);
    let loss_path = run.out.join(DENOISER_LOSS_FILE);

    let (mut net, start) = if cfg.resume && ck_path.is_file() && loss_path.is_file() {
        let params = checkpoint::load(&ck_path, DENOISER_MAGIC)?;
        (Denoiser::from_params(tcfg.net.clone(), &params)?, loss_rows(&loss_path)?)
    } else {
        (Denoiser::new(tcfg.net.clone(), InitMode::Default, &mut Rng::substream(cfg.seed, 1))?, 0)
    };
    run.prepare_out()?;
    if start == 0 {
        fs::write(&loss_path, "step,loss\n")?;
    }
    let losses = train_denoiser(&tcfg, &mut net, &items, start, &mut Rng::substream(cfg.seed, 2 + start as u64))?;
    let mut rows = String::new();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(rows, "{},{l}", start + i);
    }
    let mut trace = fs::read_to_string(&loss_path)?;
    trace.push_str(&rows);
    fs::write(&loss_path, trace)?;
    checkpoint::save(&ck_path, DENOISER_MAGIC, &net.params)?;
    println!("denoiser trained for steps {start}..{} on {} images", start + losses.len(), items.len());
    Ok(())
}

/// Wraps a predictor and counts network evaluations.
struct Counting<P> {
    inner: P,
    calls: Cell<usize>,
}

impl<P: ResidualPredictor> ResidualPredictor for Counting<P> {
    fn predict_residual(&self, i_t: &[f64], i_ld: &[f64], t: usize) -> founddiff::Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_residual(i_t, i_ld, t)
    }
}

struct Denoised {
    image: Vec<f64>,
    calls: usize,
}

fn denoise_one(
    net: &Denoiser,
    s: &CtSample,
    emb: &PerceptionOutput,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> CliResult<Denoised> {
    let down = 1usize << (cfg.levels - 1);
    if s.size % down != 0 {
        return Err(CliError::Data(format!("image size {} is not divisible by {down}", s.size)));
    }
    let sched = DiffusionSchedule::new(cfg.diffusion_steps, cfg.eta)?;
    let plan = SamplerPlan::uniform(cfg.diffusion_steps, cfg.sample_steps, cfg.stochastic_init)?;
    let predictor = Counting {
        inner: NetPredictor { net, size: s.size, e_d: &emb.e_d, e_a: &emb.e_a },
        calls: Cell::new(0),
    };
    let image = sample(&predictor, &s.ldct, &plan, &sched, rng)?;
    Ok(Denoised { image, calls: predictor.calls.get() })
}

/// Input samples with output stems: a dataset directory or one sample file.
fn denoise_inputs(input: &Path) -> CliResult<Vec<(String, CtSample)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    if input.is_dir() {
        let names: Vec<String> = read_manifest(input)?.iter().map(|(p, _, _)| stem(p)).collect();
        Ok(names.into_iter().zip(read_data(input)?).collect())
    } else if input.is_file() {
        Ok(vec![(stem(input), read_sample(input)?)])
    } else {
        Err(CliError::Data(format!("input {} does not exist", input.display())))
    }
}

pub fn denoise_cmd(run: &Run) -> CliResult<()> {
    let cfg = &run.cfg;
    let perception = load_perception(cfg)?;
    let net = load_denoiser(cfg)?;
    let inputs = denoise_inputs(&cfg.input)?;
    run.prepare_out()?;
    let samples: Vec<CtSample> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let embeddings = encode_all(&perception, &samples)?;
    let mut log = String::from("name,dose,anatomy,network_calls\n");
    let mut total_calls = 0;
    for (i, ((name, s), emb)) in inputs.iter().zip(&embeddings).enumerate() {
        let out = denoise_one(&net, s, emb, cfg, &mut Rng::substream(cfg.seed, i as u64))?;
        let raw: Vec<u8> = out.image.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(run.out.join(format!("{name}.raw")), raw)?;
        export_pgm(&run.out.join(format!("{name}.pgm")), &out.image, s.size, s.size)?;
        let _ = writeln!(log, "{name},{},{},{}", s.dose, s.anatomy, out.calls);
        total_calls += out.calls;
    }
    fs::write(run.out.join(DENOISE_LOG_FILE), log)?;
    println!("denoised {} images with {total_calls} network evaluations", inputs.len());
    Ok(())
}

fn stat_row(split: &str, dose: &str, anatomy: &str, metric: &str, values: &[f64]) -> (String, Value) {
    let label = format!("{split},{dose},{anatomy},{metric},{}", values.len());
    if values.is_empty() {
        let v = json!({"split": split, "dose": dose, "anatomy": anatomy, "metric": metric, "count": 0, "mean": null, "std": null});
        (format!("{label},missing,missing"), v)
    } else {
        let (mean, std) = mean_std(values);
        let v = json!({"split": split, "dose": dose, "anatomy": anatomy, "metric": metric, "count": values.len(), "mean": mean, "std": std});
        (format!("{label},{mean},{std}"), v)
    }
}

pub fn evaluate_cmd(run: &Run) -> CliResult<()> {
    let cfg = &run.cfg;
    let perception = load_perception(cfg)?;
    let net = load_denoiser(cfg)?;
    let data = read_data(&cfg.test_dataset)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{} is empty", cfg.test_dataset.display())));
    }
    run.prepare_out()?;
    let embeddings = encode_all(&perception, &data)?;
    let mut per_sample = MetricReport::new();
    for (i, (s, emb)) in data.iter().zip(&embeddings).enumerate() {
        let out = denoise_one(&net, s, emb, cfg, &mut Rng::substream(cfg.seed, i as u64))?;
        let id = i.to_string();
        let anatomy = s.anatomy.name();
        per_sample.push(&id, "psnr_ldct", psnr(&s.ldct, &s.ndct, 1.0)?, s.dose, anatomy);
        per_sample.push(&id, "psnr", psnr(&out.image, &s.ndct, 1.0)?, s.dose, anatomy);
        per_sample.push(&id, "ssim_ldct", ssim(&s.ldct, &s.ndct, s.size, s.size)?, s.dose, anatomy);
        per_sample.push(&id, "ssim", ssim(&out.image, &s.ndct, s.size, s.size)?, s.dose, anatomy);
        per_sample.push(&id, "dose_score", emb.y_hat, s.dose, anatomy);
    }

    let mut csv = String::from("split,dose,anatomy,metric,count,mean,std\n");
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for (split, menu) in [("seen", &cfg.seen_fractions), ("unseen", &cfg.unseen_fractions)] {
        for &dose in menu.iter() {
            for &anatomy in &cfg.families {
                for metric in CELL_METRICS {
                    let values = per_sample.values(metric, |r| r.dose == dose && r.anatomy == anatomy.name());
                    let (row, v) = stat_row(split, &dose_label(dose), anatomy.name(), metric, &values);
                    csv.push_str(&row);
                    csv.push('\n');
                    cells.push(v);
                }
                if !data.iter().any(|s| s.dose == dose && s.anatomy == anatomy) {
                    missing.push(format!("{split} {} {anatomy}", dose_label(dose)));
                }
            }
        }
    }

    let mut splits = Vec::new();
    let all: Vec<f64> = cfg.seen_fractions.iter().chain(&cfg.unseen_fractions).copied().collect();
    for (split, menu) in [("seen", &cfg.seen_fractions), ("unseen", &cfg.unseen_fractions), ("all", &all)] {
        let subset: Vec<CtSample> = data.iter().filter(|s| menu.contains(&s.dose)).cloned().collect();
        // correlations need at least two distinct doses
        let ev = if subset.is_empty() { None } else { eval_perception(&perception, &subset).ok() };
        let values = ev.map(|e| [e.plcc, e.srocc, e.anatomy_acc]);
        for (k, metric) in SPLIT_METRICS.into_iter().enumerate() {
            let n = subset.len();
            match values {
                Some(v) => {
                    let _ = writeln!(csv, "{split},all,all,{metric},{n},{},", v[k]);
                    splits.push(json!({"split": split, "metric": metric, "count": n, "value": v[k]}));
                }
                None => {
                    let _ = writeln!(csv, "{split},all,all,{metric},{n},missing,");
                    splits.push(json!({"split": split, "metric": metric, "count": n, "value": null}));
                }
            }
        }
    }

    fs::write(run.out.join("report.csv"), csv)?;
    fs::write(run.out.join("samples.csv"), per_sample.to_csv())?;
    let report = json!({"cells": cells, "perception": splits, "missing": missing});
    fs::write(run.out.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!("evaluated {} samples; {} empty cells", data.len(), missing.len());
    Ok(())
}

/// Runs every verification suite. `fault` corrupts one backward rule first.
pub fn verify_cmd(run: &Run, fault: Option<&str>) -> CliResult<()> {
    let kind = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op `{name}` for fault injection"))))
        .transpose()?;
    inject_fault(kind);
    run.prepare_out()?;
    let results = verify::run_all(run.cfg.seed, run.cfg.verify_quick);
    inject_fault(None);
    let mut report = String::new();
    for r in &results {
        println!("{}", r.line());
        report.push_str(&r.line());
        report.push('\n');
    }
    fs::write(run.out.join("verify.txt"), report)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed))
    }
}
