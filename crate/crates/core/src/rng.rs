//! Reproducible random streams.
//!
//! Every consumer of randomness asks for a generator keyed by the global
//! seed and a stream id, so datasets, anchors and training noise can be
//! regenerated independently of one another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Well-known stream ids. Sub-streams are derived with [`substream`].
pub mod streams {
    pub const DATASET: u64 = 0x01;
    pub const NET_INIT: u64 = 0x02;
    pub const ANCHORS: u64 = 0x03;
    pub const TRAIN_NOISE: u64 = 0x04;
    pub const SHUFFLE: u64 = 0x05;
    pub const SAMPLER: u64 = 0x06;
    pub const METRICS: u64 = 0x07;
    pub const LAPLACE: u64 = 0x08;
    pub const QMC_SCRAMBLE: u64 = 0x09;
}

/// Counter-based generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child stream id, e.g. one per training step.
pub fn substream(stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = stream
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
