//! Counter-based random streams: every consumer draws from `(seed, stream id)` so
//! environments, renders, episodes and filters are reproducible independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENVIRONMENT: u64 = 1;
pub const EPISODE: u64 = 2;
pub const BELIEF: u64 = 3;
pub const TRANSITION: u64 = 4;
pub const INIT: u64 = 5;
pub const RESAMPLE: u64 = 6;
pub const TRAIN: u64 = 7;
pub const CLASSIFY: u64 = 8;
pub const TRAJECTORY: u64 = 9;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream_id);
    r
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into a new seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}
