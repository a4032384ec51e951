use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one RNG used everywhere a seed is accepted.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a per-item seed so results do not depend on iteration order.
pub(crate) fn derive_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, folded with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
