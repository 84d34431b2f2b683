//! Seeded RNG streams.
//!
//! Every stochastic step derives its own ChaCha8 stream from the master seed
//! plus a purpose tag and an item index, so results do not depend on call
//! order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; each (seed, tag, index) triple yields an independent stream.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init,
    DataGen,
    Split,
    Subsample,
    KmeansInit,
    Batching,
    Occlusion,
    GradCheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::DataGen => 0x02,
            Stream::Split => 0x03,
            Stream::Subsample => 0x04,
            Stream::KmeansInit => 0x05,
            Stream::Batching => 0x06,
            Stream::Occlusion => 0x07,
            Stream::GradCheck => 0x08,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a deterministic RNG for (seed, stream, index).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ stream.tag().rotate_left(32)) ^ index);
    ChaCha8Rng::seed_from_u64(mixed)
}
