use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numcore::Rng;

/// Attenuation of the body base material; 0 HU by construction.
pub const MU_WATER: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Anatomy {
    Abdomen,
    Chest,
    Head,
}

impl Anatomy {
    pub const ALL: [Anatomy; 3] = [Anatomy::Abdomen, Anatomy::Chest, Anatomy::Head];

    pub fn name(self) -> &'static str {
        match self {
            Anatomy::Abdomen => "abdomen",
            Anatomy::Chest => "chest",
            Anatomy::Head => "head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Anatomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Anatomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Anatomy::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown anatomy `{s}`")))
    }
}

/// Ellipse with additive attenuation `rho`, rotated by `angle` about its center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub rho: f64,
}

impl Ellipse {
    pub fn circle(cx: f64, cy: f64, r: f64, rho: f64) -> Self {
        Self { cx, cy, a: r, b: r, angle: 0.0, rho }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Whether the ellipse lies inside the unit disk after rotation.
    pub fn in_unit_disk(&self) -> bool {
        self.cx.hypot(self.cy) + self.a.max(self.b) <= 1.0
    }

    /// Point on the boundary at parameter `t`.
    fn boundary(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// `self` scaled by `margin` about its center lies within `outer`.
    fn fits_inside(&self, outer: &Ellipse, margin: f64) -> bool {
        let grown = Ellipse {
            a: self.a * margin,
            b: self.b * margin,
            ..*self
        };
        (0..64).all(|k| {
            let (x, y) = grown.boundary(2.0 * PI * k as f64 / 64.0);
            outer.contains(x, y)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipsePhantom {
    pub family: Anatomy,
    pub ellipses: Vec<Ellipse>,
}

impl EllipsePhantom {
    pub fn attenuation(&self, x: f64, y: f64) -> f64 {
        if x * x + y * y > 1.0 {
            return 0.0;
        }
        self.ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.rho).sum()
    }

    /// Base attenuation of the body ellipse.
    pub fn mu_body(&self) -> f64 {
        MU_WATER
    }
}

/// Pixel-center coordinate of column `j` (left to right) in `[-1, 1]`.
pub fn pixel_x(j: usize, size: usize) -> f64 {
    -1.0 + (j as f64 + 0.5) * 2.0 / size as f64
}

/// Pixel-center coordinate of row `i` (top to bottom) in `[-1, 1]`.
pub fn pixel_y(i: usize, size: usize) -> f64 {
    1.0 - (i as f64 + 0.5) * 2.0 / size as f64
}

/// Samples the attenuation at every pixel center of a `size × size` grid.
pub fn rasterize(phantom: &EllipsePhantom, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for i in 0..size {
        let y = pixel_y(i, size);
        for j in 0..size {
            img[i * size + j] = phantom.attenuation(pixel_x(j, size), y);
        }
    }
    img
}

fn body(rng: &mut Rng, a: (f64, f64), b: (f64, f64), rho: f64) -> Ellipse {
    Ellipse {
        cx: rng.uniform_in(-0.03, 0.03),
        cy: rng.uniform_in(-0.03, 0.03),
        a: rng.uniform_in(a.0, a.1),
        b: rng.uniform_in(b.0, b.1),
        angle: rng.uniform_in(-0.1, 0.1),
        rho,
    }
}

/// Random ellipse inside `outer`, retried until it fits with some margin.
fn inner_ellipse(rng: &mut Rng, outer: &Ellipse, size: (f64, f64), rho: f64) -> Ellipse {
    loop {
        let r = rng.uniform().sqrt() * 0.75;
        let phi = rng.uniform_in(0.0, 2.0 * PI);
        let e = Ellipse {
            cx: outer.cx + r * outer.a * phi.cos(),
            cy: outer.cy + r * outer.b * phi.sin(),
            a: rng.uniform_in(size.0, size.1),
            b: rng.uniform_in(size.0, size.1),
            angle: rng.uniform_in(0.0, PI),
            rho,
        };
        if e.fits_inside(outer, 1.05) {
            return e;
        }
    }
}

/// Draws a phantom with the characteristic layout of `family`.
pub fn make_phantom(family: Anatomy, rng: &mut Rng) -> EllipsePhantom {
    let mu = MU_WATER;
    let mut ellipses = Vec::new();
    match family {
        Anatomy::Abdomen => {
            let outer = body(rng, (0.78, 0.88), (0.55, 0.68), mu);
            ellipses.push(outer);
            let count = 4 + rng.below(5);
            for _ in 0..count {
                // negatives stay small enough that eight stacked ones keep the sum positive
                let contrast = if rng.uniform() < 0.5 {
                    -rng.uniform_in(0.03, 0.12)
                } else {
                    rng.uniform_in(0.03, 0.15)
                };
                ellipses.push(inner_ellipse(rng, &outer, (0.05, 0.22), contrast * mu));
            }
        }
        Anatomy::Chest => {
            let outer = body(rng, (0.8, 0.9), (0.55, 0.65), mu);
            ellipses.push(outer);
            for side in [-1.0, 1.0] {
                let lung = loop {
                    let e = Ellipse {
                        cx: outer.cx + side * rng.uniform_in(0.36, 0.42) * outer.a,
                        cy: outer.cy + rng.uniform_in(-0.05, 0.08),
                        a: rng.uniform_in(0.24, 0.3) * outer.a,
                        b: rng.uniform_in(0.65, 0.75) * outer.b,
                        angle: side * rng.uniform_in(0.0, 0.25),
                        rho: -0.95 * mu,
                    };
                    if e.fits_inside(&outer, 1.05) {
                        break e;
                    }
                };
                ellipses.push(lung);
                for _ in 0..1 + rng.below(2) {
                    let rho = rng.uniform_in(0.5, 0.9) * mu;
                    ellipses.push(inner_ellipse(rng, &lung, (0.02, 0.05), rho));
                }
            }
            // spine
            ellipses.push(Ellipse::circle(outer.cx, outer.cy - 0.7 * outer.b, 0.07, 0.8 * mu));
        }
        Anatomy::Head => {
            let outer = body(rng, (0.7, 0.82), (0.78, 0.88), mu);
            let ring = rng.uniform_in(1.5, 2.0) * mu;
            let thickness = rng.uniform_in(0.05, 0.08);
            ellipses.push(Ellipse { rho: mu + ring, ..outer });
            let brain = Ellipse {
                a: outer.a - thickness,
                b: outer.b - thickness,
                rho: -ring,
                ..outer
            };
            ellipses.push(brain);
            let brain_region = Ellipse { rho: 0.0, ..brain };
            for _ in 0..2 + rng.below(3) {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let contrast = sign * rng.uniform_in(0.01, 0.03) * mu;
                ellipses.push(inner_ellipse(rng, &brain_region, (0.06, 0.2), contrast));
            }
        }
    }
    EllipsePhantom { family, ellipses }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_valid() {
        for seed in 0..40 {
            for fam in Anatomy::ALL {
                let p = make_phantom(fam, &mut Rng::new(seed));
                assert!(p.ellipses.len() >= 2);
                assert!(p.ellipses.iter().all(Ellipse::in_unit_disk), "{fam} {seed}");
                let img = rasterize(&p, 64);
                assert!(img.iter().all(|&v| v >= -1e-12), "{fam} {seed}");
            }
        }
    }

    #[test]
    fn head_maximum_on_ring() {
        let p = make_phantom(Anatomy::Head, &mut Rng::new(7));
        let (outer, brain) = (p.ellipses[0], p.ellipses[1]);
        let size = 128;
        let img = rasterize(&p, size);
        let (imax, _) = img
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (x, y) = (pixel_x(imax % size, size), pixel_y(imax / size, size));
        assert!(outer.contains(x, y) && !brain.contains(x, y));
    }

    #[test]
    fn chest_lungs_below_body() {
        for seed in 0..10 {
            let p = make_phantom(Anatomy::Chest, &mut Rng::new(seed));
            for lung in &p.ellipses[1..] {
                if lung.rho < 0.0 {
                    assert!(p.attenuation(lung.cx, lung.cy) < MU_WATER);
                }
            }
        }
    }

    #[test]
    fn raster_of_centered_circle() {
        let p = EllipsePhantom {
            family: Anatomy::Abdomen,
            ellipses: vec![Ellipse::circle(0.0, 0.0, 0.5, 1.0)],
        };
        let img = rasterize(&p, 64);
        assert_eq!(img[32 * 64 + 32], 1.0);
        assert_eq!(img[0], 0.0);
    }

    #[test]
    fn overlap_is_additive() {
        let p = EllipsePhantom {
            family: Anatomy::Abdomen,
            ellipses: vec![Ellipse::circle(-0.1, 0.0, 0.4, 0.3), Ellipse::circle(0.1, 0.0, 0.4, 0.2)],
        };
        assert!((p.attenuation(0.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((p.attenuation(-0.45, 0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn half_turn_leaves_raster_unchanged() {
        let e = Ellipse { cx: 0.1, cy: -0.2, a: 0.5, b: 0.2, angle: 0.3, rho: 1.0 };
        let p1 = EllipsePhantom { family: Anatomy::Abdomen, ellipses: vec![e] };
        let p2 = EllipsePhantom {
            family: Anatomy::Abdomen,
            ellipses: vec![Ellipse { angle: e.angle + PI, ..e }],
        };
        assert_eq!(rasterize(&p1, 64), rasterize(&p2, 64));
    }
}
