//! Deterministic seed splitting.
//!
//! A root seed plus a path of integer labels is folded through the
//! SplitMix64 finalizer, giving every experiment cell its own independent
//! stream regardless of the order cells are evaluated in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &label| splitmix(acc ^ splitmix(label)))
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, path: &[u64]) -> LabRng {
    rng_from_seed(derive_seed(root, path))
}

/// Stream labels, so call sites do not collide on small integers.
pub mod stream {
    pub const ADAPTER: u64 = 0xA0;
    pub const INPUT: u64 = 0xA1;
    pub const UPSTREAM: u64 = 0xA2;
    pub const BASE_WEIGHT: u64 = 0xA3;
    pub const TARGET: u64 = 0xA4;
    pub const TASK: u64 = 0xA5;
    pub const TRAIN_DATA: u64 = 0xA6;
    pub const EVAL_DATA: u64 = 0xA7;
    pub const PROBE: u64 = 0xA8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_path_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = derived_rng(3, &[4]).random();
        let b: u64 = derived_rng(3, &[4]).random();
        assert_eq!(a, b);
    }
}
