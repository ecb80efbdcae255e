//! Seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type ModelRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `tags` into `seed` (splitmix64 finalizer per tag) so that every
/// (seed, tags) combination gets an independent stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit tag for a string, used to derive per-parameter seeds.
pub fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ModelRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ModelRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}
