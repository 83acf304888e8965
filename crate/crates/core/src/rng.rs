//! Deterministic random streams derived from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `stream` under `master_seed`.
///
/// Streams share the key derived from the master seed and differ in the
/// ChaCha stream id, so their outputs never overlap.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Seed for a derived sub-task (e.g. replica `index` of ensemble `tag`).
pub fn derive_seed(master_seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = master_seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
