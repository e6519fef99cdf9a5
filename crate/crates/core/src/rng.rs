//! Seeded random streams.
//!
//! Every randomized component receives one master seed. Independent streams
//! are derived from `(seed, purpose, index)` by a fixed hash so that the
//! values drawn by a replicate or a start never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for `(seed, purpose, index)`.
pub fn stream_key(seed: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the purpose label, then mixed with seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(splitmix64(index)))
}

pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, purpose, index))
}
