use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::Tensor;

/// xoshiro256** seeded through SplitMix64.
///
/// Gaussian samples use Box–Muller over the top 53 bits of each output, with
/// the transcendental functions taken from `libm` so the stream does not
/// depend on the platform's math library.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One Box–Muller pair of standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` draws from `N(mu, sigma²)`; pairs are consumed whole, so an odd `n`
/// discards the second half of the final pair.
pub fn gaussian(rng: &mut SeededRng, n: usize, mu: f64, sigma: f64) -> Tensor {
    assert!(sigma >= 0.0, "gaussian: sigma must be non-negative");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, b) = rng.normal_pair();
        out.push(mu + sigma * a);
        if out.len() < n {
            out.push(mu + sigma * b);
        }
    }
    Tensor::vector(out)
}
