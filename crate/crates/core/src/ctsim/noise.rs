//! Photon-count dose noise.

use crate::ctsim::projection::Sinogram;
use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Eight simulated dose fractions.
pub const DOSE_MENU: [f64; 8] = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0, 1.0 / 6.0, 1.0 / 8.0, 1.0 / 10.0, 1.0 / 20.0];
/// Fractions the denoiser is trained on.
pub const SEEN_DOSES: [f64; 4] = [1.0 / 2.0, 1.0 / 4.0, 1.0 / 6.0, 1.0 / 10.0];
/// Fractions held out from denoiser training.
pub const UNSEEN_DOSES: [f64; 4] = [1.0 / 3.0, 1.0 / 5.0, 1.0 / 8.0, 1.0 / 20.0];

/// Minimum expected photon count per unattenuated ray.
pub const PHOTON_FLOOR: f64 = 10.0;

/// Tube-current fraction relative to normal dose, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DoseLevel(f64);

impl DoseLevel {
    pub fn new(fraction: f64) -> Result<Self> {
        if fraction > 0.0 && fraction <= 1.0 {
            Ok(Self(fraction))
        } else {
            Err(Error::invalid(format!("dose fraction {fraction} outside (0, 1]")))
        }
    }

    pub fn fraction(self) -> f64 {
        self.0
    }
}

/// Path length (in attenuation units) of the reference ray used by
/// [`auto_exposure`].
pub const AEC_REFERENCE: f64 = 4.0;

/// Full-dose flux under automatic exposure control.
///
/// Scales `n0` so that the mean per-ray variance `e^p / I0` of the scan equals
/// that of a single ray through [`AEC_REFERENCE`] at flux `n0`, keeping the
/// average reconstruction noise at a given dose fraction roughly independent
/// of patient size and anatomy.
pub fn auto_exposure(sino: &Sinogram, n0: f64) -> f64 {
    let mean = sino.data.iter().map(|p| p.exp()).sum::<f64>() / sino.data.len() as f64;
    n0 * mean / AEC_REFERENCE.exp()
}

/// Replaces each line integral by `-ln(max(c, 1) / I0)` with
/// `c ~ Poisson(I0 · exp(-p))` and `I0 = n0 · fraction`.
pub fn inject_dose_noise(sino: &Sinogram, dose: DoseLevel, n0: f64, rng: &mut Rng) -> Result<Sinogram> {
    let i0 = n0 * dose.fraction();
    if !(i0 >= PHOTON_FLOOR) {
        return Err(Error::PhotonFloor(i0));
    }
    let data = sino
        .data
        .iter()
        .map(|&p| {
            let counts = rng.poisson(i0 * (-p).exp());
            -((counts.max(1) as f64) / i0).ln()
        })
        .collect();
    Ok(Sinogram { data, ..*sino })
}
