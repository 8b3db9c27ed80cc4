//! Seed expansion.
//!
//! One 64-bit master seed expands into independent named sub-streams. Each
//! stream is a ChaCha20 generator keyed by the master seed with the stream
//! selector `(kind << 32) | counter`, so any component can be regenerated in
//! isolation without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Basis,
    Projection,
    Dataset,
    Training,
    Trials,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Basis => 1,
            Stream::Projection => 2,
            Stream::Dataset => 3,
            Stream::Training => 4,
            Stream::Trials => 5,
        }
    }
}

pub fn stream_rng(master: u64, stream: Stream, counter: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream((stream.id() << 32) | u64::from(counter));
    rng
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &i| {
        mix(acc ^ i.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}
