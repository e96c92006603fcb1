//! Fair classification on an unlabeled target domain: a sensitive-attribute
//! predictor is adapted from a labeled source domain, and its estimates drive
//! adversarial debiasing of a target label classifier.

pub mod adaptation;
pub mod autodiff;
pub mod data;
pub mod debias;
mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};

/// Independent random streams derived from one run seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const STAGE1_INIT: u64 = 2;
    pub const STAGE1_SHUFFLE: u64 = 3;
    pub const STAGE2_INIT: u64 = 4;
    pub const STAGE2_SHUFFLE: u64 = 5;
    pub const ADVERSARY_INIT: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const TARGET_SHUFFLE: u64 = 8;
}

/// ChaCha8 generator for `(seed, stream)`; distinct streams never overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
