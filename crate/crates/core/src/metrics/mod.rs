//! Image quality (PSNR, SSIM) and correlation (PLCC, SROCC) scores.

mod report;

pub use report::{mean_std, CellSummary, MetricRecord, MetricReport};

use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_len(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape { op, shapes: vec![vec![x.len()], vec![y.len()]] });
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("mse", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB; [`PSNR_CAP`] when the images are equal.
pub fn psnr(x: &[f64], y: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data range {data_range} must be positive")));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable filtering over the valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) for
/// images with unit dynamic range.
pub fn ssim(x: &[f64], y: &[f64], height: usize, width: usize) -> Result<f64> {
    same_len("ssim", x, y)?;
    if x.len() != height * width {
        return Err(Error::Shape { op: "ssim", shapes: vec![vec![x.len()], vec![height, width]] });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!("{height}x{width} image smaller than the SSIM window")));
    }
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, height, width, &k);
    let my = filter_valid(y, height, width, &k);
    let sxx = filter_valid(&prod(x, x), height, width, &k);
    let syy = filter_valid(&prod(y, y), height, width, &k);
    let sxy = filter_valid(&prod(x, y), height, width, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let va = sxx[i] - a * a;
            let vb = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Pearson linear correlation.
pub fn plcc(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len("plcc", u, v)?;
    if u.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 {
        return Err(Error::ZeroVariance("first"));
    }
    if svv == 0.0 {
        return Err(Error::ZeroVariance("second"));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// One-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn srocc(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len("srocc", u, v)?;
    plcc(&average_ranks(u), &average_ranks(v))
}
