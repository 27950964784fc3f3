//! Parallel-beam geometry, sinograms and forward projection.

use std::f64::consts::PI;

use crate::ctsim::phantom::EllipsePhantom;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub n_detectors: usize,
    pub detector_spacing: f64,
}

impl ScanGeometry {
    pub fn new(n_views: usize, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        let g = Self {
            n_views,
            n_detectors,
            detector_spacing,
        };
        if n_views == 0 || n_detectors % 2 == 0 || (n_detectors as f64) * detector_spacing < 2.0 {
            return Err(Error::invalid(format!("invalid scan geometry {g:?}")));
        }
        Ok(g)
    }

    /// Detector pitch equal to the pixel width of a `size`-pixel image over
    /// `[-1, 1]`, just enough bins to cover the unit disk.
    pub fn for_image(size: usize, n_views: usize) -> Result<Self> {
        let n_det = if size % 2 == 0 { size + 1 } else { size + 2 };
        Self::new(n_views, n_det, 2.0 / size as f64)
    }

    pub fn angle(&self, view: usize) -> f64 {
        PI * view as f64 / self.n_views as f64
    }

    /// Signed distance of detector bin `k` from the rotation center.
    pub fn offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors - 1) as f64 / 2.0) * self.detector_spacing
    }
}

/// Line integrals, `n_views × n_detectors`, row-major by view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_views: usize,
    pub n_detectors: usize,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(g: &ScanGeometry) -> Self {
        Self {
            n_views: g.n_views,
            n_detectors: g.n_detectors,
            data: vec![0.0; g.n_views * g.n_detectors],
        }
    }

    pub fn matches(&self, g: &ScanGeometry) -> bool {
        self.n_views == g.n_views && self.n_detectors == g.n_detectors && self.data.len() == g.n_views * g.n_detectors
    }
}

/// Exact Radon transform of an ellipse phantom.
///
/// A ray with normal angle θ at offset s meets an ellipse of semi-axes
/// (a, b) rotated by φ along a chord of length `2ab·sqrt(w² − s'²)/w²`,
/// with `w² = a²cos²(θ−φ) + b²sin²(θ−φ)` and s' the offset from the center.
pub fn project_analytic(phantom: &EllipsePhantom, g: &ScanGeometry) -> Sinogram {
    let mut sino = Sinogram::zeros(g);
    for v in 0..g.n_views {
        let theta = g.angle(v);
        let (st, ct) = theta.sin_cos();
        for e in &phantom.ellipses {
            let shift = e.cx * ct + e.cy * st;
            let rel = theta - e.angle;
            let w2 = (e.a * rel.cos()).powi(2) + (e.b * rel.sin()).powi(2);
            for k in 0..g.n_detectors {
                let s = g.offset(k) - shift;
                if s * s < w2 {
                    sino.data[v * g.n_detectors + k] += 2.0 * e.rho * e.a * e.b * (w2 - s * s).sqrt() / w2;
                }
            }
        }
    }
    sino
}

/// Bilinear sample of a `size × size` image at object coordinates (x, y),
/// zero outside the grid.
fn bilinear(img: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let scale = size as f64 / 2.0;
    let col = (x + 1.0) * scale - 0.5;
    let row = (1.0 - y) * scale - 0.5;
    let (c0, r0) = (col.floor(), row.floor());
    let (fc, fr) = (col - c0, row - r0);
    let (c0, r0) = (c0 as isize, r0 as isize);
    let n = size as isize;
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            img[r as usize * size + c as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

/// Ray-driven projection of a square image by bilinear sampling and
/// trapezoidal accumulation; `step` is in object units.
pub fn project_numeric(img: &[f64], size: usize, g: &ScanGeometry, step: f64) -> Result<Sinogram> {
    if img.len() != size * size {
        return Err(Error::invalid("image is not size×size"));
    }
    let pixel = 2.0 / size as f64;
    if step <= 0.0 || step > pixel / 2.0 {
        return Err(Error::invalid(format!("step {step} exceeds half a pixel ({pixel})")));
    }
    let reach = 2f64.sqrt();
    let n = (2.0 * reach / step).ceil() as usize + 1;
    let dt = 2.0 * reach / (n - 1) as f64;
    let mut sino = Sinogram::zeros(g);
    for v in 0..g.n_views {
        let (st, ct) = g.angle(v).sin_cos();
        for k in 0..g.n_detectors {
            let s = g.offset(k);
            let mut acc = 0.0;
            for i in 0..n {
                let t = -reach + i as f64 * dt;
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                acc += w * bilinear(img, size, s * ct - t * st, s * st + t * ct);
            }
            sino.data[v * g.n_detectors + k] = acc * dt;
        }
    }
    Ok(sino)
}
