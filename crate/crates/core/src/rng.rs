//! Deterministic seed derivation. Every random draw in the pipeline comes
//! from a ChaCha stream keyed by a master seed plus a purpose tag and
//! indices, so results never depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mixes a master seed, a purpose tag and a path of indices into one seed.
pub fn derive_seed(master: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ tag_hash(tag));
    for &p in path {
        h = splitmix64(h ^ p.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    h
}

pub fn rng_for(master: u64, tag: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag, path))
}
