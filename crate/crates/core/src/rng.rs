//! Seeded random streams.
//!
//! Every stochastic step in the toolkit draws from xoshiro256** (Blackman and
//! Vigna), seeded through SplitMix64 from a 64-bit seed and a stream tag.
//! The generator state update is
//!
//! ```text
//! result = rotl(s1 * 5, 7) * 9
//! t = s1 << 17
//! s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)
//! ```
//!
//! and SplitMix64 uses the increment `0x9e3779b97f4a7c15` with the mixing
//! multipliers `0xbf58476d1ce4e5b9` and `0x94d049bb133111eb`. Keeping the
//! algorithm fixed makes datasets and checkpoints reproducible byte for byte.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type SeedRng = Xoshiro256StarStar;

/// Named sub-streams so unrelated consumers of one seed never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 0x5359_4e54,
    Init = 0x494e_4954,
    Negatives = 0x4e45_4753,
    Masking = 0x4d41_534b,
    Batching = 0x4241_5443,
    Baseline = 0x4241_5345,
    Sampling = 0x5341_4d50,
}

/// Builds the generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: Stream) -> SeedRng {
    SeedRng::seed_from_u64(seed ^ (stream as u64).rotate_left(32))
}

/// Same as [`stream`], with an extra counter (epoch, run index, ...) mixed in.
pub fn substream(seed: u64, stream: Stream, counter: u64) -> SeedRng {
    let mixed = seed ^ (stream as u64).rotate_left(32) ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    SeedRng::seed_from_u64(mixed)
}

/// Standard normal restricted to `[-bound, bound]`, drawn by rejection.
///
/// The proposal is uniform on the interval and a candidate `x` is accepted
/// with probability `exp(-x^2 / 2)`, which yields exactly the truncated
/// N(0, 1) density.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let x = rng.random_range(-bound..=bound);
        let accept: f64 = rng.random();
        if accept < (-0.5 * x * x).exp() {
            return x;
        }
    }
}
