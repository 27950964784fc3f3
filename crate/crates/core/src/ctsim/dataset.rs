//! Paired NDCT/LDCT samples and their on-disk layout.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::fbp::fbp;
use super::noise::{auto_exposure, inject_dose_noise, DoseLevel};
use super::phantom::{make_phantom, Anatomy, MU_WATER};
use super::projection::{project_analytic, ScanGeometry};
use super::window::window_image;
use crate::error::{Error, Result};
use crate::numcore::{par_map, Rng};

pub const MANIFEST_NAME: &str = "manifest.txt";
const MAGIC: &str = "CTS1";

/// Simulation parameters that are not part of the sample file header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimMeta {
    pub geometry: ScanGeometry,
    /// Full-dose flux actually used for this scan.
    pub n0: f64,
}

/// How the full-dose flux of each scan is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exposure {
    /// Every scan uses the configured `n0`.
    Fixed,
    /// Flux follows patient attenuation, see [`auto_exposure`].
    Auto,
}

impl Exposure {
    pub fn name(self) -> &'static str {
        match self {
            Exposure::Fixed => "fixed",
            Exposure::Auto => "auto",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Exposure::Fixed),
            "auto" => Ok(Exposure::Auto),
            _ => Err(Error::invalid(format!("unknown exposure mode `{s}`"))),
        }
    }
}

/// One normal-dose / low-dose pair in window-normalized intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSample {
    pub size: usize,
    pub ndct: Vec<f64>,
    pub ldct: Vec<f64>,
    /// Dose fraction of `ldct`.
    pub dose: f64,
    pub anatomy: Anatomy,
    pub seed: u64,
    pub meta: Option<SimMeta>,
}

impl CtSample {
    /// Low-dose minus normal-dose.
    pub fn residual(&self) -> Vec<f64> {
        self.ldct.iter().zip(&self.ndct).map(|(l, n)| l - n).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub families: Vec<Anatomy>,
    pub fractions: Vec<f64>,
    pub n_per_cell: usize,
    pub size: usize,
    pub n0: f64,
    pub exposure: Exposure,
    pub n_views: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Spec with automatic exposure and `ceil(π/2 · size)` views, enough
    /// angular sampling to keep streaks out of the noiseless reconstruction.
    pub fn new(families: Vec<Anatomy>, fractions: Vec<f64>, n_per_cell: usize, size: usize, n0: f64, seed: u64) -> Self {
        Self {
            families,
            fractions,
            n_per_cell,
            size,
            n0,
            exposure: Exposure::Auto,
            n_views: default_views(size),
            seed,
        }
    }
}

pub fn default_views(size: usize) -> usize {
    (size as f64 * PI / 2.0).ceil() as usize
}

fn simulate_one(spec: &DatasetSpec, geometry: &ScanGeometry, anatomy: Anatomy, dose: DoseLevel, seed: u64) -> Result<CtSample> {
    let phantom = make_phantom(anatomy, &mut Rng::new(seed));
    let sino = project_analytic(&phantom, geometry);
    let n0 = match spec.exposure {
        Exposure::Fixed => spec.n0,
        Exposure::Auto => auto_exposure(&sino, spec.n0),
    };
    let noisy = inject_dose_noise(&sino, dose, n0, &mut Rng::substream(seed, 1))?;
    // round through f32 so that in-memory samples equal their file form
    let to_unit = |mu: Vec<f64>| -> Vec<f64> {
        window_image(&mu, MU_WATER).into_iter().map(|v| v as f32 as f64).collect()
    };
    Ok(CtSample {
        size: spec.size,
        ndct: to_unit(fbp(&sino, geometry, spec.size)?),
        ldct: to_unit(fbp(&noisy, geometry, spec.size)?),
        dose: dose.fraction(),
        anatomy,
        seed,
        meta: Some(SimMeta { geometry: *geometry, n0 }),
    })
}

/// Simulates `n_per_cell` samples for every (family, fraction) cell.
///
/// Each sample draws its own seed from a substream keyed by its cell index,
/// so samples are independent of generation order and thread count.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<CtSample>> {
    if spec.families.is_empty() || spec.fractions.is_empty() || spec.n_per_cell == 0 {
        return Err(Error::invalid("dataset needs at least one family, fraction and sample"));
    }
    if spec.size < 16 {
        return Err(Error::invalid(format!("image size {} below 16", spec.size)));
    }
    let geometry = ScanGeometry::for_image(spec.size, spec.n_views)?;
    let mut cells = Vec::new();
    for &family in &spec.families {
        for &fraction in &spec.fractions {
            let dose = DoseLevel::new(fraction)?;
            for _ in 0..spec.n_per_cell {
                let id = cells.len() as u64;
                cells.push((family, dose, Rng::substream(spec.seed, id).next_u64()));
            }
        }
    }
    par_map(&cells, |&(family, dose, seed)| simulate_one(spec, &geometry, family, dose, seed))
        .into_iter()
        .collect()
}

fn sample_file_name(index: usize, s: &CtSample) -> String {
    format!("{index:05}_{}.cts", s.anatomy)
}

pub fn write_sample(path: &Path, s: &CtSample) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "{MAGIC} {} {} {} {} {}\n", s.size, s.size, s.dose, s.anatomy, s.seed)?;
    for v in s.ndct.iter().chain(&s.ldct) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<CtSample> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not utf-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != MAGIC {
        return Err(bad("bad header"));
    }
    let h: usize = fields[1].parse().map_err(|_| bad("bad height"))?;
    let w: usize = fields[2].parse().map_err(|_| bad("bad width"))?;
    if h != w || h == 0 {
        return Err(bad("only square images are supported"));
    }
    let dose = DoseLevel::new(fields[3].parse().map_err(|_| bad("bad dose"))?)?.fraction();
    let anatomy: Anatomy = fields[4].parse()?;
    let seed: u64 = fields[5].parse().map_err(|_| bad("bad seed"))?;
    let body = &bytes[nl + 1..];
    let n = h * w;
    if body.len() != 8 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 8 * n, body.len())));
    }
    let mut planes = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect::<Vec<_>>();
    let ldct = planes.split_off(n);
    Ok(CtSample {
        size: h,
        ndct: planes,
        ldct,
        dose,
        anatomy,
        seed,
        meta: None,
    })
}

/// Writes one file per sample plus the manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[CtSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i, s);
        write_sample(&dir.join(&name), s)?;
        manifest.push_str(&format!("{name} {} {}\n", s.dose, s.anatomy));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Manifest entries as (sample path, dose fraction, anatomy).
pub fn read_manifest(dir: &Path) -> Result<Vec<(PathBuf, f64, Anatomy)>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: expected `path dose anatomy`", path.display(), lineno + 1));
        let mut parts = line.split_whitespace();
        let (Some(file), Some(dose), Some(anatomy), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let dose: f64 = dose.parse().map_err(|_| bad())?;
        entries.push((dir.join(file), dose, anatomy.parse()?));
    }
    Ok(entries)
}

/// Loads every sample listed in the manifest, checking labels agree.
pub fn read_dataset(dir: &Path) -> Result<Vec<CtSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|(path, dose, anatomy)| {
            let s = read_sample(&path)?;
            if s.dose != dose || s.anatomy != anatomy {
                return Err(Error::Format(format!("{}: labels disagree with manifest", path.display())));
            }
            Ok(s)
        })
        .collect()
}

/// 16-bit binary PGM of an image in `[0, 1]` (values clamped).
pub fn export_pgm(path: &Path, img: &[f64], width: usize, height: usize) -> Result<()> {
    if img.len() != width * height {
        return Err(Error::invalid("image size does not match dimensions"));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in img {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
