//! Deterministic derivation of child seeds from a base seed and a path of
//! integer coordinates (speaker, fold, utterance, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `path` into `base` with a SplitMix64 finaliser per step.
///
/// The result depends on the order of the coordinates, so `(1, 2)` and
/// `(2, 1)` give unrelated seeds.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base.wrapping_add(GOLDEN)), |acc, &p| {
        mix(acc ^ mix(p.wrapping_add(GOLDEN)))
    })
}

/// The generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
