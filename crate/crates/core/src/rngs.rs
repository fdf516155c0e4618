//! Deterministic RNG streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! run seed via SplitMix64, keyed by purpose and index. Collection, training
//! and evaluation draw from disjoint streams so that changing one phase's
//! consumption pattern never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// RNG stream purposes. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit,
    EnvReset,
    Delays,
    Exploration,
    Curriculum,
    CompensatorBatch,
    ReplaySample,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ParamInit => 0x01,
            Stream::EnvReset => 0x02,
            Stream::Delays => 0x03,
            Stream::Exploration => 0x04,
            Stream::Curriculum => 0x05,
            Stream::CompensatorBatch => 0x06,
            Stream::ReplaySample => 0x07,
            Stream::Eval => 0x08,
        }
    }
}

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the seed for (`run_seed`, `stream`, `index`).
pub fn derive_seed(run_seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(run_seed ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}

/// A fresh RNG for (`run_seed`, `stream`, `index`).
pub fn stream_rng(run_seed: u64, stream: Stream, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, stream, index))
}
