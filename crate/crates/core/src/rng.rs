//! Keyed random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream selected by a
//! `(seed, domain, index)` key. ChaCha is counter based, so the `k`-th draw
//! of a stream is fixed by the key alone and independent tasks never share
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use rand_chacha::ChaCha8Rng as Stream;

/// Domain tags separate streams that share a user seed.
pub mod domain {
    pub const TRAJECTORY: u64 = 0x5452_414a;
    pub const ENSEMBLE: u64 = 0x454e_5342;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const INIT: u64 = 0x494e_4954;
    pub const KERNEL: u64 = 0x4b45_524e;
    pub const KMEANS: u64 = 0x4b4d_4e53;
    pub const FORCING: u64 = 0x464f_5243;
    pub const DSM: u64 = 0x4453_4d4e;
    pub const LANGEVIN: u64 = 0x4c41_4e47;
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}

#[inline]
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Fisher–Yates permutation of `0..n` drawn from `rng`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
