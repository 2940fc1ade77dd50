//! Straight-loop reference implementation used to cross-check the optimized
//! forward pass. Everything is recomputed per output point in f64.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapa_core::{SapaParams, SimilarityKind, Tensor};

pub fn random_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn at(t: &Tensor<f64>, row: usize, col: usize) -> Vec<f64> {
    let (_, w, c) = t.dims();
    let base = (row * w + col) * c;
    t.data()[base..base + c].to_vec()
}

fn ln(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    v.iter().map(|x| (x - mean) / s).collect()
}

fn project(rows: usize, cols: usize, m: &[f64], v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum())
        .collect()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Reference forward pass with softmax kernels. Returns the output and the
/// kernels laid out as `[row][col][offset]`.
pub fn naive_forward(
    encoder: &Tensor<f64>,
    decoder: &Tensor<f64>,
    params: &SapaParams<f64>,
    kind: SimilarityKind,
    k: usize,
    ratio: usize,
) -> (Tensor<f64>, Vec<f64>) {
    let (h, w, c) = decoder.dims();
    let ce = encoder.dims().2;
    let d = params.p_x.rows();
    let eps = params.layernorm_eps;
    let px = params.p_x.data();
    let py = params.p_y.data();
    let ps = params.p_self.as_ref().map_or(px, |m| m.data());
    let r = (k / 2) as isize;
    let (oh, ow) = (h * ratio, w * ratio);
    let mut out = vec![0.0; oh * ow * c];
    let mut kernels = Vec::with_capacity(oh * ow * k * k);

    for i in 0..oh {
        for j in 0..ow {
            let (li, lj) = (i / ratio, j / ratio);
            let y = ln(&at(encoder, i, j), eps);
            let xc = ln(&at(decoder, li, lj), eps);
            let mut coords = Vec::new();
            let mut scores = Vec::new();
            for u in -r..=r {
                for v in -r..=r {
                    let (ri, rj) = (clamp(li as isize + u, h), clamp(lj as isize + v, w));
                    let xw = ln(&at(decoder, ri, rj), eps);
                    let s = match kind {
                        SimilarityKind::Inner => inner(&xw, &y),
                        SimilarityKind::Bilinear => {
                            inner(&project(d, c, px, &xw), &project(d, ce, py, &y))
                        }
                        SimilarityKind::Gated => {
                            let z = inner(&params.gate_w, &xc) + params.gate_bias;
                            let g = 1.0 / (1.0 + (-z).exp());
                            let ey = project(d, ce, py, &y);
                            let es = project(d, c, ps, &xc);
                            let q: Vec<f64> = ey
                                .iter()
                                .zip(&es)
                                .map(|(a, b)| g * a + (1.0 - g) * b)
                                .collect();
                            inner(&project(d, c, px, &xw), &q)
                        }
                    };
                    coords.push((ri, rj));
                    scores.push(s);
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (wt, &(ri, rj)) in e.iter().map(|v| v / z).zip(&coords) {
                let x = at(decoder, ri, rj);
                for ch in 0..c {
                    out[(i * ow + j) * c + ch] += wt * x[ch];
                }
                kernels.push(wt);
            }
        }
    }
    (Tensor::from_vec(oh, ow, c, out).unwrap(), kernels)
}
