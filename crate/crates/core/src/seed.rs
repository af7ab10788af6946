//! Deterministic seed derivation so per-patient and per-iteration work can run in
//! any order (or in parallel) and still draw identical random streams.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of labels into a new seed.
pub fn derive(base: u64, parts: &[&str]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(base);
    for part in parts {
        h.write(part.as_bytes());
        h.write_u8(0xff);
    }
    splitmix64(h.finish())
}

pub fn derive_index(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(base, &[label]) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
