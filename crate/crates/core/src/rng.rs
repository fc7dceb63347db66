//! Seed derivation. Every stochastic stage owns a generator derived from a
//! master seed and a stage/index path, so work can be split across threads
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finaliser applied to `master ^ f(index)`.
pub fn child_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed keyed by a stage label, e.g. `stage_seed(seed, "placement-init")`.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let key = stage.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    child_seed(master, key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_seeds_differ_by_index_and_master() {
        assert_ne!(child_seed(7, 0), child_seed(7, 1));
        assert_ne!(child_seed(7, 0), child_seed(8, 0));
        assert_eq!(child_seed(7, 3), child_seed(7, 3));
        assert_ne!(stage_seed(1, "a"), stage_seed(1, "b"));
    }
}
