//! Seeded, resumable random source.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic generator identified by `(seed, counter)`; `counter` is the
/// number of 32-bit words consumed, so a state can be persisted and resumed.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Restore a generator at an exact draw position.
    pub fn resume(seed: u64, counter: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(counter);
        RngState { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream, derived from this stream's next draw.
    pub fn fork(&mut self) -> RngState {
        RngState::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resume_continues_the_same_stream() {
        let mut a = RngState::new(7);
        for _ in 0..13 {
            a.normal();
        }
        let mut b = RngState::resume(7, a.counter());
        for _ in 0..20 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
