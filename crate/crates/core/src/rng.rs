//! Seeded randomness.
//!
//! Every random decision in the toolkit goes through [`SeededRng`]: ChaCha8 keyed
//! via `rand_core`'s `seed_from_u64` expansion. Shuffles are an explicit
//! Fisher-Yates (Durstenfeld) pass, drawing indices with [`SeededRng::below`],
//! so a reimplementation in another language reproduces the same permutations
//! from the same seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for a named sub-task, so adding draws in one place does
    /// not shift every later draw.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform integer in `0..n` by rejection on the top of the `u64` range.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        // 2^64 mod n values at the top would bias the modulo
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.0.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform `f64` in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Draw an index from unnormalised nonnegative weights.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.unit() * total;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                return i;
            }
            target -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Access for `rand_distr` samplers.
    pub fn inner(&mut self) -> &mut impl Rng {
        &mut self.0
    }
}
