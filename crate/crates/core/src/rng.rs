//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `&mut impl Rng`; these helpers
//! build reproducible generators from a run seed plus an optional stream id so
//! parallel workers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DlpmRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DlpmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> DlpmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
