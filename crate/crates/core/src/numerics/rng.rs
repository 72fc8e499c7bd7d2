//! Seeded, splittable randomness. Every consumer derives its own ChaCha
//! stream from `(seed, label)`, so adding a new consumer never shifts the
//! numbers another one sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

pub type SeededRng = ChaCha8Rng;

/// FNV-1a hash of a label, used as a ChaCha stream id.
pub fn stream_of(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, label: &str) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream_of(label));
    r
}

/// Tensor with entries uniform in `[-bound, bound]`.
pub fn uniform(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..=1.0) * bound).collect();
    Tensor::from_raw(shape.to_vec(), data)
}
