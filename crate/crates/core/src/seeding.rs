//! Deterministic seed splitting.
//!
//! Every stochastic task receives its own generator derived from the root
//! seed and a path of integer labels. A child seed is computed by folding
//! each label into the parent with one SplitMix64 round:
//!
//! ```text
//! child = splitmix64(parent ^ splitmix64(label + 1))
//! ```
//!
//! The resulting 64-bit value seeds a ChaCha8 generator. Because each task
//! owns its stream, parallel execution order never affects results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TaskRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent` by folding in `labels` in order.
pub fn derive_seed(parent: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(parent, |acc, &l| splitmix64(acc ^ splitmix64(l.wrapping_add(1))))
}

pub fn task_rng(parent: u64, labels: &[u64]) -> TaskRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, labels))
}

// Stream tags keep unrelated consumers of the same root seed apart.
pub const STREAM_RESTARTS: u64 = 1;
pub const STREAM_CALIBRATION: u64 = 2;
pub const STREAM_REESTIMATION: u64 = 3;
pub const STREAM_REPLICATE: u64 = 4;
pub const STREAM_DATASET: u64 = 5;
pub const STREAM_OPTIMIZER: u64 = 6;
pub const STREAM_BOOTSTRAP: u64 = 7;
