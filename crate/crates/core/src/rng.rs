//! Per-trajectory random streams.
//!
//! Trajectory `i` of an ensemble seeded with `base` draws from ChaCha8 keyed by
//! `base` on stream `i`, so streams are independent and need no coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrajectoryRng = ChaCha8Rng;

pub fn trajectory_rng(base_seed: u64, index: u64) -> TrajectoryRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}
