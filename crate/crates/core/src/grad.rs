//! Analytic backward pass of the upsampler and a central-difference oracle.
//!
//! `sapa_backward` returns the vector-Jacobian product of the forward pass
//! with an output cotangent, i.e. the gradients of
//! `L = sum(d_output * forward(..))`. The chain is
//!
//! ```text
//! out     = sum_p w_p x_{l+p}                          (assembly)
//! w       = softmax(s)                                 (per window)
//! s_p     = key_{l+p} . q_{l'}                         (similarity)
//! q_{l'}  = g_l e_{l'} + (1 - g_l) self_l              (gated only)
//! key, e  = P x_ln, P_y y_ln   (or x_ln, y_ln for inner)
//! x_ln    = LayerNorm(x)
//! ```
//!
//! Contributions of clamped border reads are summed into the pixel that
//! was read. Accumulation is sequential in output order, so results do not
//! depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SapaError};
use crate::kernel::{NormKind, Prepared};
use crate::reference::ReferenceForward;
use crate::similarity::{dot, layer_norm_backward_acc, Matrix, SapaParams, SimilarityKind};
use crate::tensor::{Real, Tensor, Window};
use crate::upsample::{sapa_forward, UpsamplerConfig};

/// Gradients with the shapes of the forward inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T> {
    pub d_encoder: Tensor<T>,
    pub d_decoder: Tensor<T>,
    pub d_p_x: Matrix<T>,
    pub d_p_y: Matrix<T>,
    pub d_p_self: Option<Matrix<T>>,
    pub d_gate_w: Vec<T>,
    pub d_gate_bias: T,
}

impl<T: Real> GradBundle<T> {
    pub fn is_finite(&self) -> bool {
        self.d_encoder.is_finite()
            && self.d_decoder.is_finite()
            && self.d_p_x.data().iter().all(|v| v.is_finite())
            && self.d_p_y.data().iter().all(|v| v.is_finite())
            && self
                .d_p_self
                .as_ref()
                .is_none_or(|m| m.data().iter().all(|v| v.is_finite()))
            && self.d_gate_w.iter().all(|v| v.is_finite())
            && self.d_gate_bias.is_finite()
    }

    /// Flat view of one group's gradient.
    pub fn group(&self, group: ParamGroup) -> Vec<T> {
        match group {
            ParamGroup::Encoder => self.d_encoder.data().to_vec(),
            ParamGroup::Decoder => self.d_decoder.data().to_vec(),
            ParamGroup::ProjX => self.d_p_x.data().to_vec(),
            ParamGroup::ProjY => self.d_p_y.data().to_vec(),
            ParamGroup::ProjSelf => self
                .d_p_self
                .as_ref()
                .map_or_else(Vec::new, |m| m.data().to_vec()),
            ParamGroup::GateW => self.d_gate_w.clone(),
            ParamGroup::GateBias => vec![self.d_gate_bias],
        }
    }
}

/// Vector-Jacobian product of [`sapa_forward`] with `d_output`.
///
/// Only the exponential normalizer is differentiated.
pub fn sapa_backward<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
    config: &UpsamplerConfig,
    d_output: &Tensor<T>,
) -> Result<GradBundle<T>> {
    if config.norm != NormKind::Exp {
        return Err(SapaError::config(format!(
            "backward pass supports the exp normalizer only, got {}",
            config.norm
        )));
    }
    let prep = Prepared::new(encoder, decoder, params, config, None)?;
    let (h, w, c) = decoder.dims();
    let (oh, ow, ce) = encoder.dims();
    if d_output.dims() != (oh, ow, c) {
        return Err(SapaError::config(format!(
            "output gradient is {:?}, forward output is {:?}",
            d_output.dims(),
            (oh, ow, c)
        )));
    }
    let kernels = prep.kernels(NormKind::Exp, None)?;
    let n = prep.window.len();
    let kd = prep.key_dim;
    let dec_pixels = h * w;
    let gated = prep.gates.is_some();
    let separate_self = prep.self_embed.is_some();

    let mut d_dec = vec![T::zero(); decoder.data().len()];
    let mut d_keys = vec![T::zero(); dec_pixels * kd];
    let mut d_enc_vec = vec![T::zero(); oh * ow * kd];
    let mut d_self = vec![T::zero(); if separate_self { dec_pixels * kd } else { 0 }];
    let mut d_gate = vec![T::zero(); if gated { dec_pixels } else { 0 }];

    let mut pixels = vec![0usize; n];
    let mut query = vec![T::zero(); kd];
    let mut dw = vec![T::zero(); n];
    let mut dq = vec![T::zero(); kd];

    for row in 0..oh {
        for col in 0..ow {
            let out_pix = row * ow + col;
            let g_out = d_output.pixel(row, col);
            let weights = kernels.kernel(row, col);
            prep.window_pixels(row, col, &mut pixels);

            // assembly
            for ((dwp, &pix), &wp) in dw.iter_mut().zip(&pixels).zip(weights) {
                let x = &decoder.data()[pix * c..(pix + 1) * c];
                *dwp = dot(g_out, x);
                for (d, &g) in d_dec[pix * c..(pix + 1) * c].iter_mut().zip(g_out) {
                    *d += wp * g;
                }
            }

            // softmax: ds = w * (dw - <w, dw>)
            let mean = dot(weights, &dw);
            let ds = dw.iter_mut();
            for (v, &wp) in ds.zip(weights) {
                *v = wp * (*v - mean);
            }

            // scores s_p = key_p . q
            prep.query_into(row, col, &mut query);
            dq.iter_mut().for_each(|v| *v = T::zero());
            for (&dsp, &pix) in dw.iter().zip(&pixels) {
                if dsp == T::zero() {
                    continue;
                }
                let key = prep.key(pix);
                for ((dk, dqk), (&qk, &kk)) in d_keys[pix * kd..(pix + 1) * kd]
                    .iter_mut()
                    .zip(dq.iter_mut())
                    .zip(query.iter().zip(key))
                {
                    *dk += dsp * qk;
                    *dqk += dsp * kk;
                }
            }

            let enc_slot = &mut d_enc_vec[out_pix * kd..(out_pix + 1) * kd];
            match &prep.gates {
                None => {
                    for (d, &v) in enc_slot.iter_mut().zip(&dq) {
                        *d += v;
                    }
                }
                Some(gates) => {
                    let (_, _, src) = prep.source_pixel(row, col);
                    let g = gates[src];
                    let one_minus = T::one() - g;
                    let e = prep.enc_vec(out_pix);
                    let s = prep.self_vec(src);
                    let mut dg = T::zero();
                    for ((d, &v), (&ek, &sk)) in enc_slot.iter_mut().zip(&dq).zip(e.iter().zip(s)) {
                        *d += g * v;
                        dg += v * (ek - sk);
                    }
                    d_gate[src] += dg;
                    let self_slot = if separate_self {
                        &mut d_self[src * kd..(src + 1) * kd]
                    } else {
                        &mut d_keys[src * kd..(src + 1) * kd]
                    };
                    for (d, &v) in self_slot.iter_mut().zip(&dq) {
                        *d += one_minus * v;
                    }
                }
            }
        }
    }

    // projections
    let mut d_dec_ln = vec![T::zero(); dec_pixels * c];
    let mut d_enc_ln = vec![T::zero(); oh * ow * ce];
    let mut d_p_x = Matrix::zeros(params.p_x.rows(), params.p_x.cols());
    let mut d_p_y = Matrix::zeros(params.p_y.rows(), params.p_y.cols());
    let mut d_p_self = params
        .p_self
        .as_ref()
        .map(|m| Matrix::zeros(m.rows(), m.cols()));

    match config.similarity {
        SimilarityKind::Inner => {
            d_dec_ln.copy_from_slice(&d_keys);
            d_enc_ln.copy_from_slice(&d_enc_vec);
        }
        SimilarityKind::Bilinear | SimilarityKind::Gated => {
            for pix in 0..dec_pixels {
                let gk = &d_keys[pix * kd..(pix + 1) * kd];
                let x_ln = prep.dec_ln.at(pix);
                let slot = &mut d_dec_ln[pix * c..(pix + 1) * c];
                d_p_x.add_outer(gk, x_ln);
                params.p_x.mul_t_vec_acc(gk, slot);
                if let (Some(dm), Some(m)) = (d_p_self.as_mut(), params.p_self.as_ref()) {
                    let gs = &d_self[pix * kd..(pix + 1) * kd];
                    dm.add_outer(gs, x_ln);
                    m.mul_t_vec_acc(gs, slot);
                }
            }
            for o in 0..oh * ow {
                let ge = &d_enc_vec[o * kd..(o + 1) * kd];
                d_p_y.add_outer(ge, prep.enc_ln.at(o));
                params
                    .p_y
                    .mul_t_vec_acc(ge, &mut d_enc_ln[o * ce..(o + 1) * ce]);
            }
        }
    }

    // gate
    let mut d_gate_w = vec![T::zero(); params.gate_w.len()];
    let mut d_gate_bias = T::zero();
    if let Some(gates) = &prep.gates {
        for pix in 0..dec_pixels {
            let g = gates[pix];
            let dz = d_gate[pix] * g * (T::one() - g);
            if dz == T::zero() {
                continue;
            }
            let x_ln = prep.dec_ln.at(pix);
            for (dgw, &x) in d_gate_w.iter_mut().zip(x_ln) {
                *dgw += dz * x;
            }
            d_gate_bias += dz;
            for (d, &gw) in d_dec_ln[pix * c..(pix + 1) * c]
                .iter_mut()
                .zip(&params.gate_w)
            {
                *d += dz * gw;
            }
        }
    }

    // LayerNorm
    for pix in 0..dec_pixels {
        layer_norm_backward_acc(
            prep.dec_ln.at(pix),
            prep.dec_ln.inv_std[pix],
            &d_dec_ln[pix * c..(pix + 1) * c],
            &mut d_dec[pix * c..(pix + 1) * c],
        );
    }
    let mut d_enc = vec![T::zero(); encoder.data().len()];
    for o in 0..oh * ow {
        layer_norm_backward_acc(
            prep.enc_ln.at(o),
            prep.enc_ln.inv_std[o],
            &d_enc_ln[o * ce..(o + 1) * ce],
            &mut d_enc[o * ce..(o + 1) * ce],
        );
    }

    Ok(GradBundle {
        d_encoder: Tensor::from_vec(oh, ow, ce, d_enc)?,
        d_decoder: Tensor::from_vec(h, w, c, d_dec)?,
        d_p_x,
        d_p_y,
        d_p_self,
        d_gate_w,
        d_gate_bias,
    })
}

/// Central-difference gradient of a scalar function.
///
/// The denominator is the representable distance between the two probe
/// points rather than `2 * step`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = x[i];
            let (xp, xm) = (orig + step, orig - step);
            x[i] = xp;
            let fp = f(&x);
            x[i] = xm;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (xp - xm)
        })
        .collect()
}

/// Central-difference estimate of `cotangent^T J` for a vector function.
///
/// Output differences are taken element-wise before weighting, so entries
/// untouched by a perturbation cancel exactly.
pub fn finite_diff_vjp(
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
    at: &[f64],
    cotangent: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = x[i];
            let (xp, xm) = (orig + step, orig - step);
            x[i] = xp;
            let fp = f(&x);
            x[i] = xm;
            let fm = f(&x);
            x[i] = orig;
            debug_assert_eq!(fp.len(), cotangent.len());
            let num: f64 = fp
                .iter()
                .zip(&fm)
                .zip(cotangent)
                .map(|((a, b), c)| c * (a - b))
                .sum();
            num / (xp - xm)
        })
        .collect()
}

/// Differentiable input groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    ProjX,
    ProjY,
    ProjSelf,
    GateW,
    GateBias,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::ProjX => "p_x",
            ParamGroup::ProjY => "p_y",
            ParamGroup::ProjSelf => "p_self",
            ParamGroup::GateW => "gate_w",
            ParamGroup::GateBias => "gate_bias",
        }
    }

    /// Groups that influence the output of the given configuration.
    pub fn active(kind: SimilarityKind, params: &SapaParams<f64>) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Encoder, ParamGroup::Decoder];
        match kind {
            SimilarityKind::Inner => {}
            SimilarityKind::Bilinear => groups.extend([ParamGroup::ProjX, ParamGroup::ProjY]),
            SimilarityKind::Gated => {
                groups.extend([ParamGroup::ProjX, ParamGroup::ProjY]);
                if params.p_self.is_some() {
                    groups.push(ParamGroup::ProjSelf);
                }
                groups.extend([ParamGroup::GateW, ParamGroup::GateBias]);
            }
        }
        groups
    }
}

/// A complete forward-pass input in 64-bit precision.
#[derive(Clone, Debug)]
pub struct GradcheckCase {
    pub encoder: Tensor<f64>,
    pub decoder: Tensor<f64>,
    pub params: SapaParams<f64>,
    pub config: UpsamplerConfig,
    pub d_output: Tensor<f64>,
}

impl GradcheckCase {
    /// Seeded random case: a `h x w x c` decoder, its `ratio`-times encoder,
    /// seeded parameters with a random gate bias and a random cotangent.
    pub fn random(seed: u64, config: UpsamplerConfig, h: usize, w: usize, c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.ratio;
        let decoder = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let encoder = Tensor::from_fn(r * h, r * w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let d_output = Tensor::from_fn(r * h, r * w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let mut params = SapaParams::seeded(c, c, config.embed_dim, rng.random());
        params.gate_bias = rng.random_range(-0.5..0.5);
        GradcheckCase {
            encoder,
            decoder,
            params,
            config,
            d_output,
        }
    }

    pub fn values(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Encoder => self.encoder.data().to_vec(),
            ParamGroup::Decoder => self.decoder.data().to_vec(),
            ParamGroup::ProjX => self.params.p_x.data().to_vec(),
            ParamGroup::ProjY => self.params.p_y.data().to_vec(),
            ParamGroup::ProjSelf => self
                .params
                .p_self
                .as_ref()
                .map_or_else(Vec::new, |m| m.data().to_vec()),
            ParamGroup::GateW => self.params.gate_w.clone(),
            ParamGroup::GateBias => vec![self.params.gate_bias],
        }
    }

    fn slot(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Encoder => self.encoder.data_mut(),
            ParamGroup::Decoder => self.decoder.data_mut(),
            ParamGroup::ProjX => self.params.p_x.data_mut(),
            ParamGroup::ProjY => self.params.p_y.data_mut(),
            ParamGroup::ProjSelf => match self.params.p_self.as_mut() {
                Some(m) => m.data_mut(),
                None => &mut [],
            },
            ParamGroup::GateW => &mut self.params.gate_w,
            ParamGroup::GateBias => std::slice::from_mut(&mut self.params.gate_bias),
        }
    }

    pub fn set_values(&mut self, group: ParamGroup, values: &[f64]) {
        self.slot(group).copy_from_slice(values);
    }

    pub fn forward(&self) -> Result<Tensor<f64>> {
        Ok(sapa_forward(&self.encoder, &self.decoder, &self.params, &self.config)?.0)
    }

    pub fn backward(&self) -> Result<GradBundle<f64>> {
        sapa_backward(
            &self.encoder,
            &self.decoder,
            &self.params,
            &self.config,
            &self.d_output,
        )
    }

    /// Output pixels that can change when coordinate `index` of `group`
    /// changes.
    fn affected_outputs(&self, group: ParamGroup, index: usize) -> Vec<(usize, usize)> {
        let (oh, ow, _) = self.d_output.dims();
        let all = (0..oh).flat_map(move |row| (0..ow).map(move |col| (row, col)));
        match group {
            ParamGroup::Encoder => {
                let p = index / self.encoder.channels();
                vec![(p / ow, p % ow)]
            }
            ParamGroup::Decoder => {
                let target = index / self.decoder.channels();
                let r = self.config.ratio;
                let window = Window::new(self.config.kernel_size).expect("validated kernel size");
                all.filter(|&(row, col)| {
                    window
                        .offsets()
                        .any(|(u, v)| self.decoder.clamped_index(row / r, col / r, u, v) == target)
                })
                .collect()
            }
            _ => all.collect(),
        }
    }

    /// Central-difference gradient of `sum(d_output * forward)` w.r.t. one
    /// group.
    ///
    /// The forward is evaluated in double-double precision and rounded to
    /// f64, and only output pixels that depend on the perturbed coordinate
    /// are recomputed; the others cancel exactly in the difference.
    pub fn numeric_gradient(&self, group: ParamGroup, step: f64) -> Result<Vec<f64>> {
        let n = self.values(group).len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let outputs = self.affected_outputs(group, i);
                let mut probe = self.clone();
                let orig = self.values(group)[i];
                let (xp, xm) = (orig + step, orig - step);
                let mut eval = |x: f64| -> Result<Vec<f64>> {
                    probe.slot(group)[i] = x;
                    let rf = ReferenceForward::new(
                        &probe.encoder,
                        &probe.decoder,
                        &probe.params,
                        &probe.config,
                    )?;
                    Ok(outputs
                        .iter()
                        .flat_map(|&(row, col)| rf.pixel(row, col))
                        .collect())
                };
                let (fp, fm) = (eval(xp)?, eval(xm)?);
                let num: f64 = outputs
                    .iter()
                    .flat_map(|&(row, col)| self.d_output.pixel(row, col))
                    .zip(fp.iter().zip(&fm))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                Ok(num / (xp - xm))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Floor applied to the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-8,
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

/// Compares every analytic gradient coordinate of `case` with central
/// differences.
pub fn gradcheck(case: &GradcheckCase, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let analytic = case.backward()?;
    let groups = ParamGroup::active(case.config.similarity, &case.params)
        .into_iter()
        .map(|group| {
            let a = analytic.group(group);
            let numeric = case.numeric_gradient(group, opts.step)?;
            let mut rep = GroupReport {
                group,
                coordinates: a.len(),
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst: 0,
            };
            for (i, (&x, &y)) in a.iter().zip(&numeric).enumerate() {
                let rel = relative_error(x, y, opts.floor);
                rep.max_abs_error = rep.max_abs_error.max((x - y).abs());
                if rel > rep.max_rel_error {
                    rep.max_rel_error = rel;
                    rep.worst = i;
                }
            }
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}
