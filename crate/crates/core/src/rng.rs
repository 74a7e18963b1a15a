//! Counter-keyed random streams.
//!
//! A stream is addressed by `(seed, iteration, vertex, lane)`: the seed keys a
//! ChaCha8 generator and the remaining coordinates select its 64-bit stream
//! id. Any single draw can be reproduced without replaying earlier ones, and
//! per-vertex work can run in any order or thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Lane {
    Base = 0,
    Annotation = 1,
}

const MAX_ITERATION: u64 = (1 << 31) - 1;

pub fn stream_id(iteration: u64, vertex: usize, lane: Lane) -> u64 {
    assert!(vertex <= u32::MAX as usize, "vertex id exceeds 32 bits");
    ((lane as u64) << 63) | ((iteration & MAX_ITERATION) << 32) | vertex as u64
}

pub fn stream(seed: u64, iteration: u64, vertex: usize, lane: Lane) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(iteration, vertex, lane));
    rng
}
