//! Seed discipline: every consumer of randomness draws from its own
//! ChaCha stream so ablations change exactly one stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_PERTURB: u64 = 3;
pub const STREAM_PROBE: u64 = 4;
pub const STREAM_DATA: u64 = 5;

/// Independent generator for (seed, stream).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splitmix64 step, used to derive sub-seeds (per epoch, per run).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
