//! Synthetic low-dose CT: ellipse phantoms, parallel-beam projection,
//! photon-count noise and filtered backprojection.

mod dataset;
mod fbp;
mod noise;
mod phantom;
mod projection;
mod window;

pub use dataset::{
    default_views, export_pgm, make_dataset, read_dataset, read_manifest, read_sample, write_dataset, write_sample, CtSample,
    DatasetSpec, Exposure, SimMeta, MANIFEST_NAME,
};
pub use fbp::{fbp, filter_sinogram, ramp_kernel};
pub use noise::{auto_exposure, inject_dose_noise, AEC_REFERENCE, DoseLevel, DOSE_MENU, PHOTON_FLOOR, SEEN_DOSES, UNSEEN_DOSES};
pub use phantom::{make_phantom, pixel_x, pixel_y, rasterize, Anatomy, Ellipse, EllipsePhantom, MU_WATER};
pub use projection::{project_analytic, project_numeric, ScanGeometry, Sinogram};
pub use window::{hu_to_mu, hu_to_unit, mu_to_hu, unit_to_hu, window_image, WINDOW_HU};

/// Formats a dose fraction compactly, e.g. `1/4` for 0.25.
pub fn dose_label(fraction: f64) -> String {
    let inv = 1.0 / fraction;
    if (inv - inv.round()).abs() < 1e-9 {
        format!("1/{}", inv.round() as u64)
    } else {
        format!("{fraction}")
    }
}

/// Parses `1/4`, `0.25` and similar.
pub fn parse_dose(s: &str) -> crate::Result<f64> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| crate::Error::invalid(format!("bad dose `{s}`")))?;
            let d: f64 = d.trim().parse().map_err(|_| crate::Error::invalid(format!("bad dose `{s}`")))?;
            n / d
        }
        None => s.parse().map_err(|_| crate::Error::invalid(format!("bad dose `{s}`")))?,
    };
    DoseLevel::new(value).map(DoseLevel::fraction)
}
