//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a
//! `(seed, a, b)` triple (e.g. seed, sample index, step index), so results do
//! not depend on how many other draws happened before or in what order.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for the key `(seed, a, b)`.
pub fn stream(seed: u64, a: u64, b: u64) -> Stream {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b.rotate_left(32));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(a ^ b.rotate_left(17));
    rng
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, normal_vec(rng, n))
}

pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}
