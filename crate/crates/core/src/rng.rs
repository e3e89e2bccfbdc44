//! Counter-based random streams.
//!
//! Every path draws from its own ChaCha8 stream keyed by `(seed, level, slot)`,
//! so a path's noise is a pure function of its key and results do not depend
//! on how work is scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::num::{lit, Real};

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream key: master seed, level (or batch) index, and slot (or path) index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub level: u64,
    pub slot: u64,
}

impl StreamKey {
    pub fn new(seed: u64, level: u64, slot: u64) -> Self {
        Self { seed, level, slot }
    }

    /// Key for path `slot` of a plain batch.
    pub fn path(seed: u64, slot: u64) -> Self {
        Self::new(seed, 0, slot)
    }
}

/// Independent random stream for one path.
#[derive(Debug, Clone)]
pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    pub fn new(key: StreamKey) -> Self {
        let mut seed = [0u8; 32];
        let words = [
            splitmix64(key.seed),
            splitmix64(key.seed ^ 0x5851_f42d_4c95_7f2d),
            splitmix64(key.level.wrapping_add(0x1405_7b7e_f767_814f)),
            splitmix64(key.seed.rotate_left(17) ^ key.level),
        ];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(key.slot);
        Self { rng }
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

/// Source of Brownian increments for one simulation.
pub trait NoiseSource<T> {
    /// Next increment over a step of length `dt` (`None` when exhausted).
    fn increment(&mut self, dt: T) -> Option<T>;
}

impl<T: Real> NoiseSource<T> for PathStream {
    #[inline]
    fn increment(&mut self, dt: T) -> Option<T> {
        Some(dt.sqrt() * lit::<T>(self.standard_normal()))
    }
}

/// Replays a recorded sequence of increments, e.g. to drive two schemes with the same noise.
#[derive(Debug, Clone)]
pub struct Replay<'a, T> {
    increments: &'a [T],
    pos: usize,
}

impl<'a, T> Replay<'a, T> {
    pub fn new(increments: &'a [T]) -> Self {
        Self { increments, pos: 0 }
    }
}

impl<T: Real> NoiseSource<T> for Replay<'_, T> {
    #[inline]
    fn increment(&mut self, _dt: T) -> Option<T> {
        let v = self.increments.get(self.pos).copied();
        self.pos += 1;
        v
    }
}
