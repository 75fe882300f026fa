//! Seeded random streams.
//!
//! All randomness derives from one master seed. Each consumer asks for a
//! named stream (and optionally an index, e.g. a trial or sample number), so
//! results do not depend on the order in which streams are used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod streams {
    pub const DATA: &str = "data";
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const DROPOUT: &str = "dropout";
    pub const BASELINE: &str = "baseline";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Independent generator for `(seed, name, index)`.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()).rotate_left(17));
    rng.set_stream(index);
    rng
}
