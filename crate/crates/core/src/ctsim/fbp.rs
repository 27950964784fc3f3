//! Ramp-filtered backprojection.

use std::f64::consts::PI;

use crate::ctsim::phantom::{pixel_x, pixel_y};
use crate::ctsim::projection::{ScanGeometry, Sinogram};
use crate::error::{Error, Result};

/// Spatial-domain Ram-Lak taps `h[-half..=half]`.
pub fn ramp_kernel(half: usize, spacing: f64) -> Vec<f64> {
    (-(half as isize)..=half as isize)
        .map(|n| {
            if n == 0 {
                1.0 / (4.0 * spacing * spacing)
            } else if n % 2 == 0 {
                0.0
            } else {
                -1.0 / (n as f64 * PI * spacing).powi(2)
            }
        })
        .collect()
}

/// Convolves every view with the ramp kernel (scaled by the detector pitch).
pub fn filter_sinogram(sino: &Sinogram, g: &ScanGeometry) -> Vec<f64> {
    let nd = g.n_detectors;
    let h = ramp_kernel(nd - 1, g.detector_spacing);
    let mut out = vec![0.0; sino.data.len()];
    for v in 0..g.n_views {
        let row = &sino.data[v * nd..(v + 1) * nd];
        for k in 0..nd {
            let mut acc = 0.0;
            for (m, p) in row.iter().enumerate() {
                // h index of (k - m) offset by nd - 1
                acc += p * h[k + nd - 1 - m];
            }
            out[v * nd + k] = acc * g.detector_spacing;
        }
    }
    out
}

/// Reconstructs a `size × size` image over `[-1, 1]²`.
pub fn fbp(sino: &Sinogram, g: &ScanGeometry, size: usize) -> Result<Vec<f64>> {
    if !sino.matches(g) {
        return Err(Error::invalid("sinogram does not match geometry"));
    }
    let filtered = filter_sinogram(sino, g);
    let nd = g.n_detectors;
    let center = (nd - 1) as f64 / 2.0;
    let mut img = vec![0.0; size * size];
    let xs: Vec<f64> = (0..size).map(|j| pixel_x(j, size)).collect();
    for v in 0..g.n_views {
        let (st, ct) = g.angle(v).sin_cos();
        let q = &filtered[v * nd..(v + 1) * nd];
        for i in 0..size {
            let y = pixel_y(i, size);
            let row = &mut img[i * size..(i + 1) * size];
            for (j, &x) in xs.iter().enumerate() {
                let u = (x * ct + y * st) / g.detector_spacing + center;
                let k0 = u.floor();
                let f = u - k0;
                let k0 = k0 as isize;
                let at = |k: isize| if k < 0 || k >= nd as isize { 0.0 } else { q[k as usize] };
                row[j] += (1.0 - f) * at(k0) + f * at(k0 + 1);
            }
        }
    }
    let scale = PI / g.n_views as f64;
    img.iter_mut().for_each(|v| *v *= scale);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_kernel_sums_to_nearly_zero() {
        let spacing = 2.0 / 256.0;
        let h = ramp_kernel(128, spacing);
        assert_eq!(h.len(), 257);
        let s: f64 = h.iter().sum();
        assert!((s * spacing * spacing).abs() < 1e-3);
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = ScanGeometry::for_image(32, 20).unwrap();
        let img = fbp(&Sinogram::zeros(&g), &g, 32).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }
}
