//! Independent oracles and synthetic networks for testing archslim.
//!
//! Nothing here calls into the analysis code it is meant to check; the
//! oracles are deliberately naive.

pub mod oracle;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut TestRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
