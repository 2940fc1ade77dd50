//! Upsampling kernel generation.
//!
//! For every output location `l'` with source location `l = l' / ratio`, the
//! kernel over the `K x K` decoder window is
//!
//! ```text
//! w_p = h(s_p) / sum_q h(s_q),   s_p = sim(x_{l+p}, y_{l'})
//! ```
//!
//! with `h` chosen by [`NormKind`]. Window reads are clamped at the borders.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::complexity::OpCounter;
use crate::error::{Result, SapaError};
use crate::io::GrayImage;
use crate::similarity::{dot, layer_norm_into, sigmoid, SapaParams, SimilarityKind};
use crate::tensor::{Real, Tensor, Window};
use crate::upsample::UpsamplerConfig;

/// Denominator guard for the non-exponential normalizers.
pub const NORM_EPS: f64 = 1e-8;

/// The function `h` in `h(s_i) / sum_j h(s_j)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Softmax.
    #[default]
    Exp,
    Relu,
    Sigmoid,
    Softplus,
    /// Raw scores, no normalization.
    None,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::Exp,
        NormKind::Relu,
        NormKind::Sigmoid,
        NormKind::Softplus,
        NormKind::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Exp => "exp",
            NormKind::Relu => "relu",
            NormKind::Sigmoid => "sigmoid",
            NormKind::Softplus => "softplus",
            NormKind::None => "none",
        }
    }

    /// Whether the produced weights are nonnegative and sum to one.
    pub fn is_normalizing(&self) -> bool {
        !matches!(self, NormKind::None)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = SapaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" | "softmax" => Ok(NormKind::Exp),
            "relu" => Ok(NormKind::Relu),
            "sigmoid" => Ok(NormKind::Sigmoid),
            "softplus" => Ok(NormKind::Softplus),
            "none" => Ok(NormKind::None),
            other => Err(SapaError::config(format!("unknown normalizer '{other}'"))),
        }
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln(softplus(x))`, finite for every finite `x`.
#[inline]
fn log_softplus<T: Real>(x: T) -> T {
    if x < T::from_f64_lossy(-20.0) {
        // softplus(x) = e^x (1 - e^x / 2 + ...)
        x
    } else {
        softplus(x).ln()
    }
}

/// Writes `e_i / (sum_j e_j + eps)` where `e = exp(log_h - max(log_h))`.
fn normalize_log_domain<T: Real>(out: &mut [T], eps: T) {
    let max = out.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    let denom = sum + eps;
    out.iter_mut().for_each(|o| *o = *o / denom);
}

/// Normalizes one window of scores into `out`.
///
/// `h` values are rescaled by their window maximum before the `NORM_EPS`
/// guard is added to the denominator, so the guard never dominates a window
/// of small `h`. A relu window with no positive score becomes uniform.
pub fn normalize_window_into<T: Real>(scores: &[T], kind: NormKind, out: &mut [T]) -> Result<()> {
    debug_assert_eq!(scores.len(), out.len());
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SapaError::Numeric("NaN in similarity scores".into()));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    match kind {
        NormKind::Exp => {
            let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &s) in out.iter_mut().zip(scores) {
                *o = (s - max).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        NormKind::Relu => {
            let max = scores.iter().copied().fold(T::zero(), T::max);
            if max == T::zero() {
                let u = T::one() / T::from_usize(out.len()).unwrap();
                out.iter_mut().for_each(|o| *o = u);
            } else {
                let mut sum = T::zero();
                for (o, &s) in out.iter_mut().zip(scores) {
                    *o = s.max(T::zero()) / max;
                    sum += *o;
                }
                let denom = sum + eps;
                out.iter_mut().for_each(|o| *o = *o / denom);
            }
        }
        NormKind::Sigmoid => {
            // ln sigmoid(s) = -softplus(-s)
            for (o, &s) in out.iter_mut().zip(scores) {
                *o = -softplus(-s);
            }
            normalize_log_domain(out, eps);
        }
        NormKind::Softplus => {
            for (o, &s) in out.iter_mut().zip(scores) {
                *o = log_softplus(s);
            }
            normalize_log_domain(out, eps);
        }
        NormKind::None => out.copy_from_slice(scores),
    }
    Ok(())
}

pub fn normalize_window<T: Real>(scores: &[T], kind: NormKind) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); scores.len()];
    normalize_window_into(scores, kind, &mut out)?;
    Ok(out)
}

/// Per-output-point `K x K` kernels, stored output-point-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T = f32> {
    out_height: usize,
    out_width: usize,
    window: Window,
    weights: Vec<T>,
}

impl<T: Real> KernelField<T> {
    pub fn new(out_height: usize, out_width: usize, k: usize, weights: Vec<T>) -> Result<Self> {
        let window = Window::new(k)?;
        if weights.len() != out_height * out_width * window.len() {
            return Err(SapaError::config(format!(
                "kernel field of {out_height}x{out_width} with K={k} needs {} weights, got {}",
                out_height * out_width * window.len(),
                weights.len()
            )));
        }
        Ok(KernelField {
            out_height,
            out_width,
            window,
            weights,
        })
    }

    pub fn out_height(&self) -> usize {
        self.out_height
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn kernel_size(&self) -> usize {
        self.window.size()
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// The `K^2` weights of output point `(row, col)`.
    #[inline]
    pub fn kernel(&self, row: usize, col: usize) -> &[T] {
        let n = self.window.len();
        let start = (row * self.out_width + col) * n;
        &self.weights[start..start + n]
    }

    /// Exports as a tensor with `K^2` channels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.out_height,
            self.out_width,
            self.window.len(),
            self.weights.clone(),
        )
        .expect("kernel field dims are valid")
    }

    /// Imports a tensor whose channel count is an odd square.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let c = t.channels();
        let k = (c as f64).sqrt().round() as usize;
        if k * k != c {
            return Err(SapaError::config(format!(
                "kernel tensor has {c} channels, not a square K^2"
            )));
        }
        Self::new(t.height(), t.width(), k, t.data().to_vec())
    }

    /// Weights of a single offset across all output points.
    pub fn offset_plane(&self, offset: (isize, isize)) -> Result<Vec<T>> {
        let idx = self.window.offset_index(offset).ok_or_else(|| {
            SapaError::config(format!(
                "offset ({}, {}) outside the {}x{} window",
                offset.0,
                offset.1,
                self.window.size(),
                self.window.size()
            ))
        })?;
        Ok(self
            .weights
            .chunks_exact(self.window.len())
            .map(|k| k[idx])
            .collect())
    }

    /// Grayscale image of one offset's weights, min-max scaled; a constant
    /// plane maps to 128.
    pub fn kernel_map(&self, offset: (isize, isize)) -> Result<GrayImage> {
        let plane: Vec<f64> = self
            .offset_plane(offset)?
            .into_iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let pixels = if hi > lo {
            plane
                .iter()
                .map(|&v| (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
                .collect()
        } else {
            vec![128; plane.len()]
        };
        Ok(GrayImage {
            width: self.out_width,
            height: self.out_height,
            pixels,
        })
    }
}

/// LayerNorm outputs for every pixel of a feature map.
pub(crate) struct NormedMap<T> {
    pub channels: usize,
    pub values: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> NormedMap<T> {
    fn compute(t: &Tensor<T>, eps: T) -> Self {
        let c = t.channels();
        let mut values = vec![T::zero(); t.data().len()];
        let mut inv_std = vec![T::zero(); t.pixel_count()];
        values
            .par_chunks_mut(c * t.width())
            .zip(inv_std.par_chunks_mut(t.width()))
            .zip(t.data().par_chunks(c * t.width()))
            .for_each(|((vals, inv), src)| {
                for ((v, s), i) in vals
                    .chunks_exact_mut(c)
                    .zip(src.chunks_exact(c))
                    .zip(inv.iter_mut())
                {
                    *i = layer_norm_into(s, eps, v);
                }
            });
        NormedMap {
            channels: c,
            values,
            inv_std,
        }
    }

    #[inline]
    pub fn at(&self, pix: usize) -> &[T] {
        &self.values[pix * self.channels..(pix + 1) * self.channels]
    }
}

/// Applies `m` to every pixel vector, parallel over rows of `width` pixels.
fn project_pixels<T: Real>(
    src: &[T],
    width: usize,
    m: &crate::similarity::Matrix<T>,
    counter: Option<&OpCounter>,
) -> Vec<T> {
    let (d, c) = (m.rows(), m.cols());
    let mut out = vec![T::zero(); src.len() / c * d];
    out.par_chunks_mut(width * d)
        .zip(src.par_chunks(width * c))
        .for_each(|(dst, row)| {
            for (o, v) in dst.chunks_exact_mut(d).zip(row.chunks_exact(c)) {
                m.mul_vec_into(v, o);
            }
            if let Some(cnt) = counter {
                cnt.add_embedding((row.len() / c * d * c) as u64);
            }
        });
    out
}

/// Everything the forward and backward passes share: normalized features,
/// embeddings and gates.
pub(crate) struct Prepared<T> {
    pub window: Window,
    pub ratio: usize,
    pub dec_height: usize,
    pub dec_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub dec_ln: NormedMap<T>,
    pub enc_ln: NormedMap<T>,
    /// Window-side vectors per decoder pixel: `P_x x_ln`, or `x_ln` for
    /// inner-product similarity.
    keys: Option<Vec<T>>,
    /// `P_y y_ln` per encoder pixel.
    pub enc_embed: Option<Vec<T>>,
    /// `P_self x_ln` per decoder pixel, only with a separate self projection.
    pub self_embed: Option<Vec<T>>,
    /// Gate value per decoder pixel.
    pub gates: Option<Vec<T>>,
    pub key_dim: usize,
}

impl<T: Real> Prepared<T> {
    pub fn new(
        encoder: &Tensor<T>,
        decoder: &Tensor<T>,
        params: &SapaParams<T>,
        config: &UpsamplerConfig,
        counter: Option<&OpCounter>,
    ) -> Result<Self> {
        config.check_inputs(encoder, decoder, params)?;
        let window = Window::new(config.kernel_size)?;
        let eps = params.layernorm_eps;
        let dec_ln = NormedMap::compute(decoder, eps);
        let enc_ln = NormedMap::compute(encoder, eps);
        let (dw, ew) = (decoder.width(), encoder.width());
        let kind = config.similarity;

        let (keys, key_dim) = match kind {
            SimilarityKind::Inner => (None, decoder.channels()),
            _ => (
                Some(project_pixels(&dec_ln.values, dw, &params.p_x, counter)),
                params.embed_dim(),
            ),
        };
        let enc_embed = match kind {
            SimilarityKind::Inner => None,
            _ => Some(project_pixels(&enc_ln.values, ew, &params.p_y, counter)),
        };
        let (self_embed, gates) = match kind {
            SimilarityKind::Gated => {
                let self_embed = params
                    .p_self
                    .as_ref()
                    .map(|p| project_pixels(&dec_ln.values, dw, p, counter));
                let gates: Vec<T> = (0..decoder.pixel_count())
                    .into_par_iter()
                    .with_min_len(dw)
                    .map(|pix| sigmoid(dot(&params.gate_w, dec_ln.at(pix)) + params.gate_bias))
                    .collect();
                if let Some(cnt) = counter {
                    cnt.add_gating((decoder.pixel_count() * decoder.channels()) as u64);
                }
                (self_embed, Some(gates))
            }
            _ => (None, None),
        };

        Ok(Prepared {
            window,
            ratio: config.ratio,
            dec_height: decoder.height(),
            dec_width: decoder.width(),
            out_height: encoder.height(),
            out_width: encoder.width(),
            dec_ln,
            enc_ln,
            keys,
            enc_embed,
            self_embed,
            gates,
            key_dim,
        })
    }

    /// Window-side vector of decoder pixel `pix`.
    #[inline]
    pub fn key(&self, pix: usize) -> &[T] {
        match &self.keys {
            Some(k) => &k[pix * self.key_dim..(pix + 1) * self.key_dim],
            None => self.dec_ln.at(pix),
        }
    }

    /// Self-term embedding of decoder pixel `pix` for the gated scorer.
    #[inline]
    pub fn self_vec(&self, pix: usize) -> &[T] {
        match &self.self_embed {
            Some(s) => &s[pix * self.key_dim..(pix + 1) * self.key_dim],
            None => self.key(pix),
        }
    }

    #[inline]
    pub fn enc_vec(&self, out_pix: usize) -> &[T] {
        match &self.enc_embed {
            Some(e) => &e[out_pix * self.key_dim..(out_pix + 1) * self.key_dim],
            None => self.enc_ln.at(out_pix),
        }
    }

    #[inline]
    pub fn source_pixel(&self, row: usize, col: usize) -> (usize, usize, usize) {
        let (r, c) = (row / self.ratio, col / self.ratio);
        (r, c, r * self.dec_width + c)
    }

    /// Query vector of output point `(row, col)`.
    #[inline]
    pub fn query_into(&self, row: usize, col: usize, out: &mut [T]) {
        let out_pix = row * self.out_width + col;
        let y = self.enc_vec(out_pix);
        match &self.gates {
            Some(gates) => {
                let (_, _, src) = self.source_pixel(row, col);
                let g = gates[src];
                let s = self.self_vec(src);
                for ((o, &a), &b) in out.iter_mut().zip(y).zip(s) {
                    *o = g * a + (T::one() - g) * b;
                }
            }
            None => out.copy_from_slice(y),
        }
    }

    /// Flat decoder pixel indices of the window feeding output `(row, col)`.
    #[inline]
    pub fn window_pixels(&self, row: usize, col: usize, out: &mut [usize]) {
        let (r, c, _) = self.source_pixel(row, col);
        for (slot, (u, v)) in out.iter_mut().zip(self.window.offsets()) {
            let rr = (r as isize + u).clamp(0, self.dec_height as isize - 1) as usize;
            let cc = (c as isize + v).clamp(0, self.dec_width as isize - 1) as usize;
            *slot = rr * self.dec_width + cc;
        }
    }

    /// Raw similarity scores of output `(row, col)` into `scores`.
    #[inline]
    pub fn scores_into(&self, pixels: &[usize], query: &[T], scores: &mut [T]) {
        for (s, &pix) in scores.iter_mut().zip(pixels) {
            *s = dot(self.key(pix), query);
        }
    }

    pub fn kernels(&self, norm: NormKind, counter: Option<&OpCounter>) -> Result<KernelField<T>> {
        let n = self.window.len();
        let row_len = self.out_width * n;
        let mut weights = vec![T::zero(); self.out_height * row_len];
        weights
            .par_chunks_mut(row_len)
            .enumerate()
            .try_for_each(|(row, dst)| -> Result<()> {
                let mut pixels = vec![0usize; n];
                let mut query = vec![T::zero(); self.key_dim];
                let mut scores = vec![T::zero(); n];
                for (col, w) in dst.chunks_exact_mut(n).enumerate() {
                    self.window_pixels(row, col, &mut pixels);
                    self.query_into(row, col, &mut query);
                    self.scores_into(&pixels, &query, &mut scores);
                    normalize_window_into(&scores, norm, w)?;
                }
                if let Some(cnt) = counter {
                    if self.gates.is_some() {
                        cnt.add_gating((2 * self.out_width * self.key_dim) as u64);
                    }
                    cnt.add_inner_product((self.out_width * n * self.key_dim) as u64);
                }
                Ok(())
            })?;
        KernelField::new(self.out_height, self.out_width, self.window.size(), weights)
    }
}

pub(crate) fn generate_kernels_counted<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
    counter: Option<&OpCounter>,
) -> Result<KernelField<T>> {
    Prepared::new(encoder, decoder, params, config, counter)?.kernels(config.norm, counter)
}

/// Kernel field for upsampling `decoder` guided by `encoder`.
pub fn generate_kernels<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
) -> Result<KernelField<T>> {
    generate_kernels_counted(encoder, decoder, params, config, None)
}
