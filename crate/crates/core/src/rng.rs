//! Seeded random streams.
//!
//! Every source of randomness in a run is derived from one root seed and a
//! named stream, so changing e.g. the dropout stream leaves data generation
//! and initialization untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substreams of a root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Init,
    Dropout,
    NllSampling,
    Split,
    Noise,
    Evaluation,
    Shuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Dropout => 3,
            Stream::NllSampling => 4,
            Stream::Split => 5,
            Stream::Noise => 6,
            Stream::Evaluation => 7,
            Stream::Shuffle => 8,
        }
    }
}

/// Generator for `stream` under `root`.
pub fn substream(root: u64, stream: Stream) -> Rng {
    derived(root, stream, 0)
}

/// Generator for item `index` of `stream` under `root` (per-sample seeds,
/// per-pass seeds). Distinct triples give independent ChaCha keys.
pub fn derived(root: u64, stream: Stream, index: u64) -> Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.id().to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..].copy_from_slice(b"crackuq\0");
    ChaCha8Rng::from_seed(seed)
}

/// Plain generator from a single seed, for tests and one-off use.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
