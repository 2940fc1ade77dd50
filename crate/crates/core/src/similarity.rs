//! LayerNorm preprocessing, low-rank projections and the similarity scorers.
//!
//! All scorers take layer-normalized channel vectors. The bilinear and gated
//! scorers are always evaluated through the `d`-dimensional embeddings
//! `P_x x` and `P_y y`; the `C x C` product `P_x^T P_y` is never formed.
//!
//! The gated scorer mixes in embedded space:
//!
//! ```text
//! g      = sigmoid(w . x_center + b)
//! y_hat  = g * (P_y y) + (1 - g) * (P_s x_center)
//! score  = (P_x x_window) . y_hat
//! ```
//!
//! where `P_s = P_x` by default. Supplying a separate self projection
//! (`SapaParams::p_self`) gives the three-matrix form.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SapaError};
use crate::tensor::Real;

/// Default LayerNorm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    /// `x . y`; encoder and decoder channel counts must match.
    Inner,
    /// `(P_x x) . (P_y y)`
    Bilinear,
    /// Gate-modulated bilinear similarity.
    Gated,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [
        SimilarityKind::Inner,
        SimilarityKind::Bilinear,
        SimilarityKind::Gated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityKind::Inner => "inner",
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::Gated => "gated",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityKind {
    type Err = SapaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inner" | "i" => Ok(SimilarityKind::Inner),
            "bilinear" | "b" => Ok(SimilarityKind::Bilinear),
            "gated" | "g" => Ok(SimilarityKind::Gated),
            other => Err(SapaError::config(format!("unknown similarity '{other}'"))),
        }
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SapaError::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// `rows x rows` identity, zero-padded to `cols` columns.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = M v`
    #[inline]
    pub fn mul_vec_into(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, v);
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// `out += M^T g`
    #[inline]
    pub(crate) fn mul_t_vec_acc(&self, g: &[T], out: &mut [T]) {
        for (&gi, row) in g.iter().zip(self.data.chunks_exact(self.cols)) {
            for (o, &m) in out.iter_mut().zip(row) {
                *o += gi * m;
            }
        }
    }

    /// `M += g v^T`
    #[inline]
    pub(crate) fn add_outer(&mut self, g: &[T], v: &[T]) {
        for (&gi, row) in g.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            for (m, &vj) in row.iter_mut().zip(v) {
                *m += gi * vj;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Matrix { rows, cols, data }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Learnable state of the upsampler.
#[derive(Clone, Debug, PartialEq)]
pub struct SapaParams<T> {
    /// Decoder projection, `d x C`.
    pub p_x: Matrix<T>,
    /// Encoder projection, `d x C_enc`.
    pub p_y: Matrix<T>,
    /// Optional separate self-term projection for the gated scorer, `d x C`.
    /// `None` reuses `p_x`.
    pub p_self: Option<Matrix<T>>,
    /// Gate projection weights, length `C`.
    pub gate_w: Vec<T>,
    pub gate_bias: T,
    pub layernorm_eps: T,
}

impl<T: Real> SapaParams<T> {
    /// Seeded initialization: projections and gate weights uniform in
    /// `+-1/sqrt(fan_in)`, gate bias zero.
    pub fn seeded(dec_channels: usize, enc_channels: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = 1.0 / (dec_channels as f64).sqrt();
        let by = 1.0 / (enc_channels as f64).sqrt();
        let p_x = Matrix::uniform(embed_dim, dec_channels, bx, &mut rng);
        let p_y = Matrix::uniform(embed_dim, enc_channels, by, &mut rng);
        let gate_w = (0..dec_channels)
            .map(|_| T::from_f64_lossy(rng.random_range(-bx..bx)))
            .collect();
        let params = SapaParams {
            p_x,
            p_y,
            p_self: None,
            gate_w,
            gate_bias: T::zero(),
            layernorm_eps: T::from_f64_lossy(LAYERNORM_EPS),
        };
        params.warn_if_not_low_rank();
        params
    }

    /// Adds an independently seeded self projection (three-matrix gated form).
    pub fn with_separate_self_projection(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1f_5e1f);
        let bound = 1.0 / (self.dec_channels() as f64).sqrt();
        self.p_self = Some(Matrix::uniform(
            self.embed_dim(),
            self.dec_channels(),
            bound,
            &mut rng,
        ));
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.p_x.rows()
    }

    pub fn dec_channels(&self) -> usize {
        self.p_x.cols()
    }

    pub fn enc_channels(&self) -> usize {
        self.p_y.cols()
    }

    /// The projection applied to the decoder centre vector in the gated
    /// self term.
    pub fn self_projection(&self) -> &Matrix<T> {
        self.p_self.as_ref().unwrap_or(&self.p_x)
    }

    /// Number of learnable scalars the given scorer actually uses.
    pub fn param_count(&self, kind: SimilarityKind) -> usize {
        match kind {
            SimilarityKind::Inner => 0,
            SimilarityKind::Bilinear => self.p_x.data.len() + self.p_y.data.len(),
            SimilarityKind::Gated => {
                self.p_x.data.len()
                    + self.p_y.data.len()
                    + self.p_self.as_ref().map_or(0, |m| m.data.len())
                    + self.gate_w.len()
                    + 1
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let c = self.dec_channels();
        if d == 0 {
            return Err(SapaError::config("embedding dimension must be positive"));
        }
        if self.p_y.rows() != d {
            return Err(SapaError::config(format!(
                "p_y has {} rows, p_x has {d}",
                self.p_y.rows()
            )));
        }
        if self.gate_w.len() != c {
            return Err(SapaError::config(format!(
                "gate weights have length {}, decoder has {c} channels",
                self.gate_w.len()
            )));
        }
        if let Some(p) = &self.p_self {
            if p.rows() != d || p.cols() != c {
                return Err(SapaError::config(format!(
                    "self projection is {}x{}, expected {d}x{c}",
                    p.rows(),
                    p.cols()
                )));
            }
        }
        if self.layernorm_eps.is_nan() || self.layernorm_eps <= T::zero() {
            return Err(SapaError::config("layernorm eps must be positive"));
        }
        Ok(())
    }

    fn warn_if_not_low_rank(&self) {
        if self.embed_dim() > self.dec_channels() || self.embed_dim() > self.enc_channels() {
            log::warn!(
                "embedding dim {} exceeds channel count ({} decoder, {} encoder); projections are not low-rank",
                self.embed_dim(),
                self.dec_channels(),
                self.enc_channels()
            );
        }
    }

    pub fn cast<U: Real>(&self) -> SapaParams<U> {
        SapaParams {
            p_x: self.p_x.cast(),
            p_y: self.p_y.cast(),
            p_self: self.p_self.as_ref().map(Matrix::cast),
            gate_w: self.gate_w.iter().map(|&v| U::from(v).unwrap()).collect(),
            gate_bias: U::from(self.gate_bias).unwrap(),
            layernorm_eps: U::from(self.layernorm_eps).unwrap(),
        }
    }
}

/// Normalizes `v` into `out` and returns `1 / sqrt(var + eps)`.
#[inline]
pub fn layer_norm_into<T: Real>(v: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_usize(v.len()).unwrap();
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v
        .iter()
        .map(|&x| {
            let c = x - mean;
            c * c
        })
        .sum::<T>()
        / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - mean) * inv_std;
    }
    inv_std
}

/// Channel-wise LayerNorm without affine parameters.
pub fn layer_norm<T: Real>(v: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    layer_norm_into(v, eps, &mut out);
    out
}

/// Gradient of LayerNorm w.r.t. its input given the normalized output
/// `xhat`, `inv_std` and the upstream gradient `g`. Accumulates into `out`.
#[inline]
pub(crate) fn layer_norm_backward_acc<T: Real>(xhat: &[T], inv_std: T, g: &[T], out: &mut [T]) {
    let n = T::from_usize(xhat.len()).unwrap();
    let mean_g = g.iter().copied().sum::<T>() / n;
    let mean_gx = dot(g, xhat) / n;
    for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xhat) {
        *o += inv_std * (gi - mean_g - xi * mean_gx);
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(SapaError::config(format!(
            "{what}: length {a} does not match {b}"
        )));
    }
    Ok(())
}

pub fn sim_inner<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    check_len(x.len(), y.len(), "inner similarity")?;
    Ok(dot(x, y))
}

pub fn sim_bilinear<T: Real>(x: &[T], y: &[T], params: &SapaParams<T>) -> Result<T> {
    check_len(
        x.len(),
        params.p_x.cols(),
        "bilinear similarity decoder vector",
    )?;
    check_len(
        y.len(),
        params.p_y.cols(),
        "bilinear similarity encoder vector",
    )?;
    Ok(dot(&params.p_x.mul_vec(x), &params.p_y.mul_vec(y)))
}

/// Gate value in `(0, 1)` for a layer-normalized decoder vector.
pub fn gate<T: Real>(x_ln: &[T], params: &SapaParams<T>) -> T {
    sigmoid(dot(&params.gate_w, x_ln) + params.gate_bias)
}

/// Gated similarity with the gate computed from `x_center_ln`.
pub fn sim_gated<T: Real>(
    x_center_ln: &[T],
    x_window_ln: &[T],
    y_ln: &[T],
    params: &SapaParams<T>,
) -> Result<T> {
    check_len(x_center_ln.len(), params.gate_w.len(), "gate input")?;
    let g = gate(x_center_ln, params);
    sim_gated_with(g, x_center_ln, x_window_ln, y_ln, params)
}

/// Gated similarity with an explicit gate value.
pub fn sim_gated_with<T: Real>(
    g: T,
    x_center_ln: &[T],
    x_window_ln: &[T],
    y_ln: &[T],
    params: &SapaParams<T>,
) -> Result<T> {
    let p_s = params.self_projection();
    check_len(
        x_center_ln.len(),
        p_s.cols(),
        "gated similarity centre vector",
    )?;
    check_len(
        x_window_ln.len(),
        params.p_x.cols(),
        "gated similarity window vector",
    )?;
    check_len(
        y_ln.len(),
        params.p_y.cols(),
        "gated similarity encoder vector",
    )?;
    let ey = params.p_y.mul_vec(y_ln);
    let es = p_s.mul_vec(x_center_ln);
    let q: Vec<T> = ey
        .iter()
        .zip(&es)
        .map(|(&a, &b)| g * a + (T::one() - g) * b)
        .collect();
    Ok(dot(&params.p_x.mul_vec(x_window_ln), &q))
}
