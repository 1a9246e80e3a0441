//! Seedable random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain, a, b)`, so results do not depend on evaluation order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream namespaces. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Projection = 2,
    PowerBeta = 3,
    Shuffle = 4,
    Evaluation = 5,
    Sweep = 6,
    Data = 7,
    Test = 8,
}

/// Independent stream for `(seed, domain, a, b)`; in the trainer `a` is the
/// layer index and `b` the step counter.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
