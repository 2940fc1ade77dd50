//! Two-cluster fixtures: a decoder split into two constant half-planes at a
//! vertical seam and an encoder with the same split at the output
//! resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Half-width of the uniform noise added to the encoder.
pub const ENCODER_NOISE: f32 = 0.01;

#[derive(Clone, Debug)]
pub struct TwoCluster {
    pub decoder: Tensor<f32>,
    pub encoder: Tensor<f32>,
    /// Value of decoder columns `< seam`.
    pub a: Vec<f32>,
    /// Value of decoder columns `>= seam`.
    pub b: Vec<f32>,
    /// First decoder column of cluster `b`.
    pub seam: usize,
    pub ratio: usize,
}

impl TwoCluster {
    /// Deterministic in all arguments.
    pub fn generate(height: usize, width: usize, channels: usize, ratio: usize, seed: u64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0 && ratio > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..channels)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect()
        };
        let a = draw(&mut rng);
        let mut b = draw(&mut rng);
        while b == a {
            b = draw(&mut rng);
        }
        let seam = width / 2;
        let decoder = Tensor::from_fn(height, width, channels, |_, col, ch| {
            if col < seam {
                a[ch]
            } else {
                b[ch]
            }
        });
        let enc_seam = seam * ratio;
        let encoder = Tensor::from_fn(height * ratio, width * ratio, channels, |_, col, ch| {
            let base = if col < enc_seam { a[ch] } else { b[ch] };
            base + rng.random_range(-ENCODER_NOISE..ENCODER_NOISE)
        });
        TwoCluster {
            decoder,
            encoder,
            a,
            b,
            seam,
            ratio,
        }
    }

    /// Whether output column `col` lies in cluster `a` at the output
    /// resolution.
    pub fn output_in_a(&self, col: usize) -> bool {
        col < self.seam * self.ratio
    }
}

/// Number of output columns containing a value strictly inside
/// `(min(a_c, b_c), max(a_c, b_c))` for some channel, after shrinking the
/// interval by `margin * |a_c - b_c|` at both ends.
pub fn transition_width(t: &Tensor<f32>, a: &[f32], b: &[f32], margin: f64) -> usize {
    let (h, w, c) = t.dims();
    (0..w)
        .filter(|&col| {
            (0..h).any(|row| {
                let px = t.pixel(row, col);
                (0..c).any(|ch| {
                    let (lo, hi) = (a[ch].min(b[ch]) as f64, a[ch].max(b[ch]) as f64);
                    let pad = margin * (hi - lo);
                    let v = px[ch] as f64;
                    hi > lo && v > lo + pad && v < hi - pad
                })
            })
        })
        .count()
}
