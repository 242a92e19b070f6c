//! Deterministic random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stable 64-bit tag for a stream name.
pub fn tag(name: &str) -> u64 {
    let mut h = crate::tensor::Fnv::default();
    h.write(name.as_bytes());
    h.finish()
}
