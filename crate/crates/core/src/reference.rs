//! Double-double evaluation of the softmax forward pass, rounded to f64
//! only at the output. Used as the function under finite differences, where
//! accumulated rounding in an ordinary f64 forward would dominate the
//! difference quotient for small gradients.

use crate::dd::Dd;
use crate::error::{Result, SapaError};
use crate::kernel::NormKind;
use crate::similarity::{Matrix, SapaParams, SimilarityKind};
use crate::tensor::{Tensor, Window};
use crate::upsample::UpsamplerConfig;

fn layer_norm(v: &[f64], eps: f64) -> Vec<Dd> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| Dd::from(x)).sum::<Dd>() / n;
    let centred: Vec<Dd> = v.iter().map(|&x| Dd::from(x) - mean).collect();
    let var = centred.iter().map(|&c| c * c).sum::<Dd>() / n;
    let std = (var + Dd::from(eps)).sqrt();
    centred.into_iter().map(|c| c / std).collect()
}

fn project(m: &Matrix<f64>, v: &[Dd]) -> Vec<Dd> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(&a, &b)| b * a).sum())
        .collect()
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Forward pass with the decoder-side terms precomputed, evaluated one
/// output pixel at a time.
pub struct ReferenceForward<'a> {
    encoder: &'a Tensor<f64>,
    decoder: &'a Tensor<f64>,
    params: &'a SapaParams<f64>,
    kind: SimilarityKind,
    window: Window,
    ratio: usize,
    keys: Vec<Vec<Dd>>,
    self_embed: Vec<Vec<Dd>>,
    gates: Vec<Dd>,
}

impl<'a> ReferenceForward<'a> {
    pub fn new(
        encoder: &'a Tensor<f64>,
        decoder: &'a Tensor<f64>,
        params: &'a SapaParams<f64>,
        config: &UpsamplerConfig,
    ) -> Result<Self> {
        config.check_inputs(encoder, decoder, params)?;
        if config.norm != NormKind::Exp {
            return Err(SapaError::Config(format!(
                "reference forward supports the exp normalizer only, got {}",
                config.norm
            )));
        }
        let eps = params.layernorm_eps;
        let kind = config.similarity;
        let (h, w, _) = decoder.dims();
        let normed: Vec<Vec<Dd>> = (0..h * w)
            .map(|p| layer_norm(decoder.pixel(p / w, p % w), eps))
            .collect();
        let (mut self_embed, mut gates) = (Vec::new(), Vec::new());
        if kind == SimilarityKind::Gated {
            for x in &normed {
                self_embed.push(project(params.self_projection(), x));
                let z = x
                    .iter()
                    .zip(&params.gate_w)
                    .map(|(&a, &b)| a * b)
                    .sum::<Dd>()
                    + Dd::from(params.gate_bias);
                gates.push(z.sigmoid());
            }
        }
        let keys = match kind {
            SimilarityKind::Inner => normed,
            _ => normed.iter().map(|x| project(&params.p_x, x)).collect(),
        };
        Ok(ReferenceForward {
            encoder,
            decoder,
            params,
            kind,
            window: Window::new(config.kernel_size)?,
            ratio: config.ratio,
            keys,
            self_embed,
            gates,
        })
    }

    /// Output vector at `(row, col)` of the upsampled grid.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        let (_, w, c) = self.decoder.dims();
        let (sr, sc) = (row / self.ratio, col / self.ratio);
        let centre = sr * w + sc;
        let y = layer_norm(self.encoder.pixel(row, col), self.params.layernorm_eps);
        let query = match self.kind {
            SimilarityKind::Inner => y,
            SimilarityKind::Bilinear => project(&self.params.p_y, &y),
            SimilarityKind::Gated => {
                let g = self.gates[centre];
                let e = project(&self.params.p_y, &y);
                e.iter()
                    .zip(&self.self_embed[centre])
                    .map(|(&a, &s)| g * a + (Dd::ONE - g) * s)
                    .collect()
            }
        };
        let pixels: Vec<usize> = self
            .window
            .offsets()
            .map(|(u, v)| self.decoder.clamped_index(sr, sc, u, v))
            .collect();
        let scores: Vec<Dd> = pixels.iter().map(|&p| dot(&self.keys[p], &query)).collect();
        let max = scores.iter().copied().fold(scores[0], Dd::max);
        let e: Vec<Dd> = scores.iter().map(|&s| (s - max).exp()).collect();
        let z: Dd = e.iter().copied().sum();
        let mut out = vec![Dd::ZERO; c];
        for (&p, &ep) in pixels.iter().zip(&e) {
            let wt = ep / z;
            for (o, &x) in out.iter_mut().zip(self.decoder.pixel(p / w, p % w)) {
                *o = *o + wt * x;
            }
        }
        out.into_iter().map(Dd::to_f64).collect()
    }

    pub fn forward(&self) -> Tensor<f64> {
        let (oh, ow) = (self.encoder.height(), self.encoder.width());
        let c = self.decoder.channels();
        let mut data = Vec::with_capacity(oh * ow * c);
        for row in 0..oh {
            for col in 0..ow {
                data.extend(self.pixel(row, col));
            }
        }
        Tensor::from_vec(oh, ow, c, data).expect("shape follows the encoder grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upsample::sapa_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_the_f64_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Tensor::from_fn(4, 5, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let enc = Tensor::from_fn(8, 10, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let mut params = SapaParams::seeded(3, 3, 2, 7).with_separate_self_projection(1);
        params.gate_bias = 0.4;
        for kind in SimilarityKind::ALL {
            let cfg = UpsamplerConfig {
                similarity: kind,
                norm: NormKind::Exp,
                kernel_size: 5,
                embed_dim: 2,
                ratio: 2,
            };
            let (want, _) = sapa_forward(&enc, &dec, &params, &cfg).unwrap();
            let got = ReferenceForward::new(&enc, &dec, &params, &cfg)
                .unwrap()
                .forward();
            assert!(got.max_abs_diff(&want) < 1e-14, "{kind}");
        }
    }

    #[test]
    fn rejects_other_normalizers() {
        let t = Tensor::<f64>::filled(2, 2, 2, 1.0);
        let e = Tensor::<f64>::filled(4, 4, 2, 1.0);
        let params = SapaParams::seeded(2, 2, 2, 0);
        let cfg = UpsamplerConfig {
            norm: NormKind::Relu,
            embed_dim: 2,
            ..UpsamplerConfig::default()
        };
        assert!(ReferenceForward::new(&e, &t, &params, &cfg).is_err());
    }
}
