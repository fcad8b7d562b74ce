//! Deterministic seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by `(seed, tags...)`, so results do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, t| splitmix(acc ^ splitmix(*t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

pub fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const STEP_INDEX: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const GUIDANCE: u64 = 6;
}
