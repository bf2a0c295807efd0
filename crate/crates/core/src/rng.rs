//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! `mix(master, [stream_id, extra...])`, where `mix` chains the SplitMix64
//! finalizer. Streams are therefore independent of call order and of each
//! other, which is what makes dataset generation and training resumable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Signal = 1,
    Noise = 2,
    Shuffle = 3,
    Mask = 4,
    Init = 5,
    Dropout = 6,
    Dataset = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `words` into `seed`.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix(seed), |acc, &w| splitmix(acc ^ splitmix(w)))
}

/// FNV-1a of a string, for name-keyed streams (parameter init).
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Master seed with per-purpose derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    pub master: u64,
}

pub fn set_global_seed(seed: u64) -> SeedStreams {
    SeedStreams { master: seed }
}

impl SeedStreams {
    pub fn seed(&self, stream: Stream, extra: &[u64]) -> u64 {
        let mut words = Vec::with_capacity(extra.len() + 1);
        words.push(stream as u64);
        words.extend_from_slice(extra);
        mix(self.master, &words)
    }

    pub fn rng(&self, stream: Stream, extra: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, extra))
    }
}

/// Two independent standard normals via Box–Muller.
pub fn normal_pair(rng: &mut impl Rng) -> (f64, f64) {
    // u1 in (0, 1] keeps ln finite.
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Normal draw truncated to `[-2σ, 2σ]` by rejection.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let (a, b) = normal_pair(rng);
        if a.abs() <= 2.0 {
            return a * std;
        }
        if b.abs() <= 2.0 {
            return b * std;
        }
    }
}
