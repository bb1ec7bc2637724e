//! Reproducible random streams.
//!
//! Each Monte-Carlo path gets its own ChaCha stream keyed by `(seed, stream)`,
//! so a path's draws do not depend on how many paths run or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Mixes a sub-stream index into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
