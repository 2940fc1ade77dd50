//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapa_core::{SapaParams, Tensor};

/// Random decoder `h x w x c`, its `ratio`-times encoder and seeded
/// parameters with embedding dimension `d`.
pub fn fixture(
    h: usize,
    w: usize,
    c: usize,
    d: usize,
    ratio: usize,
    seed: u64,
) -> (Tensor, Tensor, SapaParams<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0));
    let enc = Tensor::from_fn(h * ratio, w * ratio, c, |_, _, _| {
        rng.random_range(-1.0f32..1.0)
    });
    (enc, dec, SapaParams::seeded(c, c, d, seed))
}
