//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 generator keyed by
//! a root seed and a 64-bit stream id. Stream ids are built from a purpose tag
//! in the high bits and a counter (trajectory index, replicate, ...) in the
//! low bits, so independent jobs never share a stream and results do not
//! depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags occupying the top 16 bits of a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    Trajectory = 1,
    Split = 2,
    Init = 3,
    Shuffle = 4,
    OneDim = 5,
    Experiment = 6,
}

pub fn stream_id(purpose: Purpose, counter: u64) -> u64 {
    debug_assert!(counter < 1 << 48);
    ((purpose as u64) << 48) | (counter & ((1 << 48) - 1))
}

/// Generator for `(root, purpose, counter)`.
pub fn stream(root: u64, purpose: Purpose, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream_id(purpose, counter));
    rng
}

/// Derive a child root seed, used when a whole sub-experiment needs its own
/// family of streams.
pub fn child_seed(root: u64, purpose: Purpose, counter: u64) -> u64 {
    use rand::RngCore;
    stream(root, purpose, counter).next_u64()
}
