//! Feature assembly, the end-to-end forward pass, and fixed-rule baselines.

use rayon::prelude::*;

use crate::complexity::OpCounter;
use crate::error::{Result, SapaError};
use crate::kernel::{generate_kernels_counted, KernelField, NormKind};
use crate::similarity::{SapaParams, SimilarityKind};
use crate::tensor::{Real, Tensor};

/// Operator hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpsamplerConfig {
    pub similarity: SimilarityKind,
    pub norm: NormKind,
    /// Odd window size `K`.
    pub kernel_size: usize,
    /// Embedding dimension `d` of the projections.
    pub embed_dim: usize,
    /// Integer upscale ratio.
    pub ratio: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        UpsamplerConfig {
            similarity: SimilarityKind::Gated,
            norm: NormKind::Exp,
            kernel_size: 5,
            embed_dim: 32,
            ratio: 2,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(SapaError::config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(SapaError::config("embedding dimension must be positive"));
        }
        if self.ratio == 0 {
            return Err(SapaError::config("upscale ratio must be at least 1"));
        }
        Ok(())
    }

    /// Checks encoder/decoder/parameter shapes against this configuration.
    pub fn check_inputs<T: Real>(
        &self,
        encoder: &Tensor<T>,
        decoder: &Tensor<T>,
        params: &SapaParams<T>,
    ) -> Result<()> {
        self.validate()?;
        let (h, w, c) = decoder.dims();
        let expected = (self.ratio * h, self.ratio * w);
        if (encoder.height(), encoder.width()) != expected {
            return Err(SapaError::config(format!(
                "encoder is {}x{}, expected ({}, {}) for a {h}x{w} decoder at ratio {}",
                encoder.height(),
                encoder.width(),
                expected.0,
                expected.1,
                self.ratio
            )));
        }
        match self.similarity {
            SimilarityKind::Inner => {
                if encoder.channels() != c {
                    return Err(SapaError::config(format!(
                        "inner-product similarity needs equal channel counts, encoder has {} and decoder has {c}",
                        encoder.channels()
                    )));
                }
            }
            SimilarityKind::Bilinear | SimilarityKind::Gated => {
                params.validate()?;
                if params.embed_dim() != self.embed_dim {
                    return Err(SapaError::config(format!(
                        "parameters have embedding dim {}, configuration asks for {}",
                        params.embed_dim(),
                        self.embed_dim
                    )));
                }
                if params.dec_channels() != c || params.enc_channels() != encoder.channels() {
                    return Err(SapaError::config(format!(
                        "parameters expect {} decoder / {} encoder channels, got {c} / {}",
                        params.dec_channels(),
                        params.enc_channels(),
                        encoder.channels()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn assemble_counted<T: Real>(
    decoder: &Tensor<T>,
    kernels: &KernelField<T>,
    ratio: usize,
    counter: Option<&OpCounter>,
) -> Result<Tensor<T>> {
    let (h, w, c) = decoder.dims();
    if ratio == 0 || kernels.out_height() != ratio * h || kernels.out_width() != ratio * w {
        return Err(SapaError::config(format!(
            "kernel field is {}x{}, expected ({}, {}) for a {h}x{w} decoder at ratio {ratio}",
            kernels.out_height(),
            kernels.out_width(),
            ratio * h,
            ratio * w
        )));
    }
    let window = kernels.window();
    let (oh, ow) = (kernels.out_height(), kernels.out_width());
    let mut out = vec![T::zero(); oh * ow * c];
    out.par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(row, dst)| {
            let src_row = row / ratio;
            for (col, px) in dst.chunks_exact_mut(c).enumerate() {
                let kernel = kernels.kernel(row, col);
                for (&wgt, (u, v)) in kernel.iter().zip(window.offsets()) {
                    let idx = decoder.clamped_index(src_row, col / ratio, u, v);
                    let src = &decoder.data()[idx * c..(idx + 1) * c];
                    for (o, &x) in px.iter_mut().zip(src) {
                        *o += wgt * x;
                    }
                }
            }
            if let Some(cnt) = counter {
                cnt.add_assembly((ow * window.len() * c) as u64);
            }
        });
    Tensor::from_vec(oh, ow, c, out)
}

/// Weighted sum of each output point's clamped decoder window.
pub fn assemble<T: Real>(
    decoder: &Tensor<T>,
    kernels: &KernelField<T>,
    ratio: usize,
) -> Result<Tensor<T>> {
    assemble_counted(decoder, kernels, ratio, None)
}

pub(crate) fn sapa_forward_counted<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
    counter: Option<&OpCounter>,
) -> Result<(Tensor<T>, KernelField<T>)> {
    let kernels = generate_kernels_counted(encoder, decoder, params, config, counter)?;
    let out = assemble_counted(decoder, &kernels, config.ratio, counter)?;
    Ok((out, kernels))
}

/// Upsamples `decoder` by `config.ratio` using kernels guided by `encoder`.
/// Returns the upsampled map and the kernel field used.
pub fn sapa_forward<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
) -> Result<(Tensor<T>, KernelField<T>)> {
    sapa_forward_counted(encoder, decoder, params, config, None)
}

pub fn upsample_nearest<T: Real>(t: &Tensor<T>, ratio: usize) -> Result<Tensor<T>> {
    if ratio == 0 {
        return Err(SapaError::config("upscale ratio must be at least 1"));
    }
    let (h, w, c) = t.dims();
    let mut out = Tensor::zeros(h * ratio, w * ratio, c);
    for row in 0..h * ratio {
        for col in 0..w * ratio {
            out.pixel_mut(row, col)
                .copy_from_slice(t.pixel(row / ratio, col / ratio));
        }
    }
    Ok(out)
}

/// Source coordinate and blend factor along one axis.
fn bilinear_axis(
    dst: usize,
    in_len: usize,
    ratio: usize,
    align_corners: bool,
) -> (usize, usize, f64) {
    let src = if align_corners {
        let out_len = in_len * ratio;
        if out_len > 1 {
            dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    } else {
        ((dst as f64 + 0.5) / ratio as f64 - 0.5).max(0.0)
    };
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling; half-pixel centres unless `align_corners`.
pub fn upsample_bilinear<T: Real>(
    t: &Tensor<T>,
    ratio: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    if ratio == 0 {
        return Err(SapaError::config("upscale ratio must be at least 1"));
    }
    let (h, w, c) = t.dims();
    let mut out = Tensor::zeros(h * ratio, w * ratio, c);
    for row in 0..h * ratio {
        let (r0, r1, fy) = bilinear_axis(row, h, ratio, align_corners);
        let fy = T::from_f64_lossy(fy);
        for col in 0..w * ratio {
            let (c0, c1, fx) = bilinear_axis(col, w, ratio, align_corners);
            let fx = T::from_f64_lossy(fx);
            let (p00, p01, p10, p11) = (
                t.pixel(r0, c0),
                t.pixel(r0, c1),
                t.pixel(r1, c0),
                t.pixel(r1, c1),
            );
            let dst = out.pixel_mut(row, col);
            for ch in 0..c {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bot = p10[ch] + (p11[ch] - p10[ch]) * fx;
                dst[ch] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}
