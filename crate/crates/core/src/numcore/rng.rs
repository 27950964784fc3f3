//! Seeded random streams.
//!
//! All randomness in the crate flows through [`Rng`]. Independent work items
//! (dataset cells, samples in a batch) draw from substreams keyed by an id so
//! that results do not depend on scheduling order.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Below this mean, Poisson draws use exact inversion.
pub const POISSON_INVERSION_LIMIT: f64 = 30.0;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Stream `id` of the generator seeded with `seed`.
    pub fn substream(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator whose seed is drawn from this one.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.random())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Poisson draw: sequential-search inversion for small means, rounded
    /// normal approximation (clamped at zero) otherwise.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        if mean < POISSON_INVERSION_LIMIT {
            let u = self.uniform();
            let mut p = (-mean).exp();
            let mut cdf = p;
            let mut k = 0u64;
            // cdf can stall just below 1 from rounding; the cap keeps the loop finite
            while u > cdf && k < 1000 {
                k += 1;
                p *= mean / k as f64;
                cdf += p;
            }
            k
        } else {
            let draw = (mean + mean.sqrt() * self.normal()).round();
            draw.max(0.0) as u64
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.poisson(4.5), b.poisson(4.5));
            assert_eq!(a.poisson(1e4), b.poisson(1e4));
        }
    }

    #[test]
    fn substreams_differ() {
        let mut a = Rng::substream(7, 1);
        let mut b = Rng::substream(7, 2);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn poisson_moments() {
        let mut rng = Rng::new(3);
        for &mean in &[0.5, 7.0, 29.0, 200.0] {
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| rng.poisson(mean) as f64).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 5.0 * se, "mean {m} vs {mean}");
            assert!((v / mean - 1.0).abs() < 0.1, "var {v} vs {mean}");
        }
    }
}
