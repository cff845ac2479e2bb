use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Half-width of the uniform Glorot range, `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))` drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn seeded_init(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    seeded_uniform(shape, glorot_bound(fan_in, fan_out), seed)
}

/// Derives a per-parameter seed from a model seed and a parameter name
/// (FNV-1a over the name, mixed with SplitMix64).
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded_uniform(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}
