//! Hounsfield conversion and the fixed display window.

/// Lower and upper window bounds in HU.
pub const WINDOW_HU: (f64, f64) = (-1000.0, 2000.0);

pub fn mu_to_hu(mu: f64, mu_water: f64) -> f64 {
    1000.0 * (mu - mu_water) / mu_water
}

pub fn hu_to_mu(hu: f64, mu_water: f64) -> f64 {
    mu_water * (1.0 + hu / 1000.0)
}

/// Affine map of the window onto `[0, 1]` (unclamped).
pub fn hu_to_unit(hu: f64) -> f64 {
    (hu - WINDOW_HU.0) / (WINDOW_HU.1 - WINDOW_HU.0)
}

pub fn unit_to_hu(u: f64) -> f64 {
    WINDOW_HU.0 + u * (WINDOW_HU.1 - WINDOW_HU.0)
}

/// Attenuation image to window-normalized intensities clamped to `[0, 1]`.
pub fn window_image(mu: &[f64], mu_water: f64) -> Vec<f64> {
    mu.iter().map(|&m| hu_to_unit(mu_to_hu(m, mu_water)).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn water_and_air() {
        assert_eq!(mu_to_hu(2.0, 2.0), 0.0);
        assert_eq!(hu_to_unit(-1000.0), 0.0);
        assert_eq!(hu_to_unit(2000.0), 1.0);
    }

    proptest! {
        #[test]
        fn window_round_trip(hu in -1000.0f64..2000.0) {
            prop_assert!((unit_to_hu(hu_to_unit(hu)) - hu).abs() < 1e-12);
        }
    }
}
