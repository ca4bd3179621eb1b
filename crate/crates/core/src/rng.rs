//! Seed derivation and random streams.
//!
//! Shuffling uses SplitMix64 (Steele, Lea & Flood) so that any
//! implementation can reproduce batch orders exactly:
//!
//! * stream key: `derive_seed(&[seed, epoch])`
//! * Fisher–Yates from the back: for `i = n-1 .. 1`,
//!   `j = next_u64() % (i + 1)`, swap `order[i]` and `order[j]`.
//!
//! `derive_seed(parts)` starts from `0x243F6A8885A308D3` and, for every
//! part, seeds SplitMix64 with `acc ^ part` and takes its first output
//! as the new `acc`.
//!
//! Weight initialization and Gaussian noise use ChaCha8 seeded with a
//! derived key.

use avic_tensor::{Scalar, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::Result;

/// Stream tags keeping per-purpose random streams apart.
pub mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const INIT_VAE: u64 = 10;
    pub const INIT_GEN: u64 = 11;
    pub const INIT_CLS: u64 = 12;
    pub const NOISE_VAE: u64 = 20;
    pub const NOISE_GEN: u64 = 21;
    pub const NOISE_GLOBAL: u64 = 22;
    pub const NOISE_EVAL: u64 = 23;
    pub const NOISE_ATTACK: u64 = 24;
    pub const PGD_INIT: u64 = 30;
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        SplitMix64::seed_from_u64(acc ^ p).next_u64()
    })
}

pub fn shuffle_stream(seed: u64, epoch: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(&[seed, epoch]))
}

/// Permutation of `0..n` for `(seed, epoch)`.
pub fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = shuffle_stream(seed, epoch);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

pub fn chacha(key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key)
}

/// Standard normal tensor drawn from a ChaCha8 stream keyed by `key`.
pub fn normal_tensor<T: Scalar>(shape: &[usize], key: u64) -> Result<Tensor<T>> {
    let mut rng = chacha(key);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Uniform tensor on `[lo, hi)`.
pub fn uniform_tensor<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}
