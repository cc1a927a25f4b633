//! Seed derivation. Every consumer of randomness gets its own stream derived
//! from one root seed, so adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a consumer label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = mix(root);
    for byte in label.bytes() {
        h = mix(h ^ u64::from(byte));
    }
    h
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_give_distinct_streams() {
        assert_ne!(derive_seed(7, "data"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "data"), derive_seed(8, "data"));
        assert_eq!(derive_seed(7, "data"), derive_seed(7, "data"));
    }
}
