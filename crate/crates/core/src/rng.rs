//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`Rng64`], a thin wrapper over
//! xoshiro256++ seeded via splitmix64 (`seed_from_u64` in `rand_xoshiro` uses
//! a splitmix64 stream to fill the state). Float and range conversions are
//! implemented here directly so the value stream is a function of the u64
//! stream alone and does not depend on any other crate's conversion code.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// The i-th output of a splitmix64 stream started at `seed`, computed in O(1).
///
/// splitmix64 advances its state by the golden-ratio constant once per draw,
/// so output i can be produced directly from `seed + (i+1)*GOLDEN` followed by
/// the output mix. Used to derive independent per-sample seeds that do not
/// depend on generation order.
pub fn splitmix64_at(seed: u64, index: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = seed.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string. Used to give every named parameter its own
/// seed stream so initialization of shared names is identical across model
/// variants.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// xoshiro256++ generator with deterministic f64 conversions.
#[derive(Debug, Clone)]
pub struct Rng64 {
    inner: Xoshiro256PlusPlus,
}

impl Rng64 {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng64 {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Generator for stream `index` derived from a base seed.
    pub fn derived(seed: u64, index: u64) -> Self {
        Self::seed_from_u64(splitmix64_at(seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform usize in [0, n). Multiply-shift; bias is below 2^-53 for the
    /// small n used here.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Uniform usize in [lo, hi] inclusive.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller. One draw per call; the second variate
    /// of the pair is discarded to keep the stream a simple function of call
    /// count.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
