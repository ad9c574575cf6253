//! Splittable, seeded random streams.
//!
//! A [`RandomStream`] is addressed by a root seed and a derivation path. The
//! generator state for a path is obtained by hashing `(seed, path)`, so a child
//! stream never depends on how many variates its parent or siblings consumed.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut h = mix64(seed.wrapping_add(GOLDEN_GAMMA));
    for (depth, &p) in path.iter().enumerate() {
        h = mix64(h ^ mix64(p.wrapping_add((depth as u64 + 1).wrapping_mul(GOLDEN_GAMMA))));
    }
    let mut key = [0u8; 32];
    let mut state = h;
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(GOLDEN_GAMMA);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    key
}

/// Seeded source of unit-interval and Gaussian variates.
///
/// Identical `(seed, path)` pairs reproduce identical variate sequences.
/// Streams own their state, so distinct children can be moved to different
/// threads without sharing anything.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    path: Vec<u64>,
    rng: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, Vec::new())
    }

    pub fn with_path(seed: u64, path: Vec<u64>) -> Self {
        let rng = ChaCha12Rng::from_seed(derive_key(seed, &path));
        Self { seed, path, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Substream at `path ++ [index]`, freshly keyed.
    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self::with_path(self.seed, path)
    }

    /// Substream at `path ++ indices`.
    pub fn descend(&self, indices: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(indices);
        Self::with_path(self.seed, path)
    }

    /// Uniform variate on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    /// Standard normal variate.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Raw 64-bit output, used for integer draws in tests and allocation search.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}
