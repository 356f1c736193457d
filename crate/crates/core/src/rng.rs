//! Seeded random streams with a bit-stable output sequence.
//!
//! Training, noise sampling, shuffling, and parameter initialization all need
//! reproducible draws: the same seed must produce the same bytes on every run
//! and keep producing them across dependency upgrades. The generator is
//! therefore implemented here (xoshiro256** seeded through splitmix64) instead
//! of pulling in an external RNG crate whose stream could shift between
//! versions.
//!
//! Distinct concerns draw from distinct [`streams`] forked off one master
//! seed, so consuming extra draws in one stream (e.g. noise sampling) never
//! shifts another (e.g. batch shuffling).

use alloc::vec::Vec;
use core::f64::consts::PI;

/// splitmix64 step; used for seeding and stream derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

/// Stream tags deriving independent substreams from one master seed.
pub mod streams {
    pub const ENCODER_INIT: u64 = 1;
    pub const GENERATOR_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUG_PICK: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DATA: u64 = 7;
}

impl Rng {
    /// Seed the full 256-bit state from one word via splitmix64.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        Rng {
            state: [
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
            ],
        }
    }

    /// Derive the substream `tag` of `master_seed` (see [`streams`]).
    pub fn stream(master_seed: u64, tag: u64) -> Self {
        let mut sm = master_seed;
        let base = splitmix64(&mut sm);
        Rng::from_seed(base ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    /// Raw state, for bit-exact checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Restore from a checkpointed state.
    pub fn from_state(state: [u64; 4]) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[0, n)` without modulo bias.
    pub fn next_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_range requires n > 0");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box–Muller, cosine branch).
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
    }

    /// Uniform draw in `(lo, hi)` scaled from `next_f64`.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(i + 1);
            items.swap(i, j);
        }
    }
}
