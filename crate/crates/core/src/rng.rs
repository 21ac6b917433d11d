//! Explicit, splittable random streams. Nothing in the crate draws from
//! a global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids so that sampling, initialization and selection
/// never share draws.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_EPISODES: u64 = 2;
    pub const DEV_EPISODES: u64 = 3;
    pub const EVAL_EPISODES: u64 = 4;
    pub const SELECTION: u64 = 5;
    pub const PERTURBATION: u64 = 6;
    pub const SPLIT: u64 = 7;
}
