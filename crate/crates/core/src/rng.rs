//! Seeded random tensors.
//!
//! The generator is ChaCha8 keyed by the 64-bit seed; independent streams
//! come from ChaCha's 64-bit stream selector, so a model can draw every
//! weight tensor from its own stream and adding a layer never perturbs the
//! others.
//!
//! * uniforms take the top 53 bits of a `u64` and scale by `2^-53`;
//! * normals use the Box-Muller cosine branch on two uniforms, one normal
//!   per pair, with `u1` mapped to `(0, 1]`;
//! * lattice entries are integers drawn uniformly from `[-2^k, 2^k]` and
//!   scaled by `2^-k`, so they and their products are exact in `f64`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Generator for `(seed, stream)`; distinct streams never overlap.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.standard_normal())
    }

    /// Dyadic lattice values `n / 2^k` with `n` uniform in `[-2^k, 2^k]`.
    pub fn lattice(&mut self, shape: &[usize], k: u32) -> Tensor {
        let scale = 2f64.powi(-(k as i32));
        let bound = 1i64 << k;
        Tensor::from_fn(shape, |_| self.int_in(-bound, bound) as f64 * scale)
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.int_in(0, i as i64) as usize;
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_k0_is_ternary() {
        let t = Rng::new(1).lattice(&[50, 50], 0);
        assert!(t.data().iter().all(|&x| x == -1.0 || x == 0.0 || x == 1.0));
        for v in [-1.0, 0.0, 1.0] {
            assert!(t.data().contains(&v));
        }
    }

    #[test]
    fn lattice_values_are_dyadic() {
        let t = Rng::new(2).lattice(&[1000], 3);
        assert!(t.data().iter().all(|&x| (x * 8.0).fract() == 0.0 && x.abs() <= 1.0));
    }

    #[test]
    fn same_seed_same_tensors() {
        let a = Rng::new(42).normal(&[4, 5]);
        let b = Rng::new(42).normal(&[4, 5]);
        assert_eq!(a, b);
        assert_eq!(Rng::new(42).lattice(&[9], 2), Rng::new(42).lattice(&[9], 2));
        assert_ne!(Rng::new(42).normal(&[4]), Rng::new(43).normal(&[4]));
        assert_ne!(Rng::with_stream(42, 1).normal(&[4]), Rng::with_stream(42, 2).normal(&[4]));
    }

    #[test]
    fn normal_mean_and_variance() {
        // CLT: the sample mean of 1e5 draws has sd ~0.0032, so 0.02 is > 6 sd.
        let t = Rng::new(7).normal(&[100_000]);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = Rng::new(9).permutation(33);
        p.sort_unstable();
        assert_eq!(p, (0..33).collect::<Vec<_>>());
    }
}
