//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each binding is a thin wrapper over a plain function so that the logic
//! can be tested natively.

use founddiff::ctsim::{
    fbp, inject_dose_noise, make_phantom, project_analytic, rasterize, window_image, Anatomy, DoseLevel, ScanGeometry,
    MU_WATER,
};
use founddiff::diffusion::{DiffusionSchedule, SamplerPlan};
use founddiff::metrics::psnr;
use founddiff::numcore::Rng;
use wasm_bindgen::prelude::*;

/// Full-dose flux of a demo scan.
pub const DEMO_N0: f64 = 1e5;

/// One simulated slice: window-normalized NDCT and LDCT images.
#[wasm_bindgen]
pub struct Slice {
    size: usize,
    ndct: Vec<f32>,
    ldct: Vec<f32>,
    psnr: f64,
}

#[wasm_bindgen]
impl Slice {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn ndct(&self) -> Vec<f32> {
        self.ndct.clone()
    }

    pub fn ldct(&self) -> Vec<f32> {
        self.ldct.clone()
    }

    /// PSNR of the LDCT against the NDCT image, in dB.
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
}

/// Sinogram, ground truth and reconstruction of a noiseless phantom.
#[wasm_bindgen]
pub struct Reconstruction {
    views: usize,
    detectors: usize,
    sinogram: Vec<f32>,
    truth: Vec<f32>,
    fbp: Vec<f32>,
    psnr: f64,
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn views(&self) -> usize {
        self.views
    }

    #[wasm_bindgen(getter)]
    pub fn detectors(&self) -> usize {
        self.detectors
    }

    pub fn sinogram(&self) -> Vec<f32> {
        self.sinogram.clone()
    }

    pub fn truth(&self) -> Vec<f32> {
        self.truth.clone()
    }

    pub fn fbp(&self) -> Vec<f32> {
        self.fbp.clone()
    }

    /// PSNR of the windowed reconstruction against the windowed phantom.
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
}

fn family(name: &str) -> founddiff::Result<Anatomy> {
    name.parse()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Simulates one NDCT/LDCT pair with fixed full-dose flux.
pub fn simulate(name: &str, dose: f64, size: usize, views: usize, seed: u32) -> founddiff::Result<Slice> {
    let dose = DoseLevel::new(dose)?;
    let phantom = make_phantom(family(name)?, &mut Rng::new(seed as u64));
    let g = ScanGeometry::for_image(size, views)?;
    let sino = project_analytic(&phantom, &g);
    let noisy = inject_dose_noise(&sino, dose, DEMO_N0, &mut Rng::substream(seed as u64, 1))?;
    let ndct = window_image(&fbp(&sino, &g, size)?, MU_WATER);
    let ldct = window_image(&fbp(&noisy, &g, size)?, MU_WATER);
    Ok(Slice { size, psnr: psnr(&ldct, &ndct, 1.0)?, ndct: to_f32(&ndct), ldct: to_f32(&ldct) })
}

/// Projects a phantom and reconstructs it by filtered backprojection.
pub fn reconstruct(name: &str, size: usize, views: usize, seed: u32) -> founddiff::Result<Reconstruction> {
    let phantom = make_phantom(family(name)?, &mut Rng::new(seed as u64));
    let g = ScanGeometry::for_image(size, views)?;
    let sino = project_analytic(&phantom, &g);
    let truth = window_image(&rasterize(&phantom, size), MU_WATER);
    let recon = window_image(&fbp(&sino, &g, size)?, MU_WATER);
    Ok(Reconstruction {
        views: g.n_views,
        detectors: g.n_detectors,
        sinogram: to_f32(&sino.data),
        psnr: psnr(&recon, &truth, 1.0)?,
        truth: to_f32(&truth),
        fbp: to_f32(&recon),
    })
}

/// `ᾱ_0..ᾱ_T` followed by `β̄_0..β̄_T`.
pub fn schedule(steps: usize, eta: f64) -> founddiff::Result<Vec<f64>> {
    let s = DiffusionSchedule::new(steps, eta)?;
    Ok(s.alpha_bar.iter().chain(&s.beta_bar).copied().collect())
}

/// Timesteps visited by an evenly spaced few-step sampler.
pub fn timesteps(steps: usize, sample_steps: usize) -> founddiff::Result<Vec<u32>> {
    Ok(SamplerPlan::uniform(steps, sample_steps, false)?.timesteps.iter().map(|&t| t as u32).collect())
}

fn js(e: founddiff::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = simulateSlice)]
pub fn simulate_slice(family: &str, dose: f64, size: usize, views: usize, seed: u32) -> Result<Slice, JsError> {
    simulate(family, dose, size, views, seed).map_err(js)
}

#[wasm_bindgen(js_name = reconstructPhantom)]
pub fn reconstruct_phantom(family: &str, size: usize, views: usize, seed: u32) -> Result<Reconstruction, JsError> {
    reconstruct(family, size, views, seed).map_err(js)
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves(steps: usize, eta: f64) -> Result<Vec<f64>, JsError> {
    schedule(steps, eta).map_err(js)
}

#[wasm_bindgen(js_name = samplerTimesteps)]
pub fn sampler_timesteps(steps: usize, sample_steps: usize) -> Result<Vec<u32>, JsError> {
    timesteps(steps, sample_steps).map_err(js)
}
