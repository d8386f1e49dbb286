//! Few-shot semantic segmentation from sparse annotations.
//!
//! The crate covers the data model and dataset loading, sparse-annotation
//! simulators, a small U-Net, bilevel meta-learning with exact second-order
//! gradients, prototype-based segmentation, baselines and the evaluation
//! protocol.

pub mod bench;
pub mod data;
pub mod error;
pub mod losses;
pub mod network;
pub mod optim;
pub mod protoseg;
pub mod report;
pub mod sparsify;
pub mod synth;
pub mod train;
pub mod weasel;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide seeded generator.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a path of indices
/// (e.g. epoch and task number), using SplitMix64 mixing.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
