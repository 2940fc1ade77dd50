//! Parameter bundles on disk.
//!
//! A bundle is a directory of SAPT files:
//!
//! | file          | tensor shape        | contents                              |
//! |---------------|---------------------|---------------------------------------|
//! | `p_x.sapt`    | `d x 1 x C`         | decoder projection, one row per `h`   |
//! | `p_y.sapt`    | `d x 1 x C_enc`     | encoder projection, one row per `h`   |
//! | `gate.sapt`   | `1 x 1 x (C + 1)`   | gate weights followed by the bias     |
//! | `p_self.sapt` | `d x 1 x C`         | optional separate gate self projection |
//!
//! Missing files fall back to seeded initialization.

use std::path::Path;

use crate::error::{Result, SapaError};
use crate::io::{read_tensor, write_tensor};
use crate::similarity::{Matrix, SapaParams};
use crate::tensor::Tensor;

pub const P_X_FILE: &str = "p_x.sapt";
pub const P_Y_FILE: &str = "p_y.sapt";
pub const GATE_FILE: &str = "gate.sapt";
pub const P_SELF_FILE: &str = "p_self.sapt";

fn matrix_to_tensor(m: &Matrix<f32>) -> Tensor<f32> {
    Tensor::from_vec(m.rows(), 1, m.cols(), m.data().to_vec()).expect("matrix dims are positive")
}

fn tensor_to_matrix(t: &Tensor<f32>, rows: usize, cols: usize, name: &str) -> Result<Matrix<f32>> {
    if t.dims() != (rows, 1, cols) {
        return Err(SapaError::config(format!(
            "{name} has shape {:?}, expected ({rows}, 1, {cols})",
            t.dims()
        )));
    }
    Matrix::from_vec(rows, cols, t.data().to_vec())
}

pub fn save_params(params: &SapaParams<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_tensor(&matrix_to_tensor(&params.p_x), dir.join(P_X_FILE))?;
    write_tensor(&matrix_to_tensor(&params.p_y), dir.join(P_Y_FILE))?;
    let mut gate = params.gate_w.clone();
    gate.push(params.gate_bias);
    write_tensor(
        &Tensor::from_vec(1, 1, gate.len(), gate)?,
        dir.join(GATE_FILE),
    )?;
    if let Some(p) = &params.p_self {
        write_tensor(&matrix_to_tensor(p), dir.join(P_SELF_FILE))?;
    }
    Ok(())
}

/// Loads whatever files exist in `dir` over a seeded initialization.
pub fn load_params(
    dir: Option<&Path>,
    dec_channels: usize,
    enc_channels: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<SapaParams<f32>> {
    let mut params = SapaParams::seeded(dec_channels, enc_channels, embed_dim, seed);
    let Some(dir) = dir else {
        return Ok(params);
    };
    let p = dir.join(P_X_FILE);
    if p.exists() {
        params.p_x = tensor_to_matrix(&read_tensor(&p)?, embed_dim, dec_channels, P_X_FILE)?;
    }
    let p = dir.join(P_Y_FILE);
    if p.exists() {
        params.p_y = tensor_to_matrix(&read_tensor(&p)?, embed_dim, enc_channels, P_Y_FILE)?;
    }
    let p = dir.join(GATE_FILE);
    if p.exists() {
        let t = read_tensor(&p)?;
        if t.dims() != (1, 1, dec_channels + 1) {
            return Err(SapaError::config(format!(
                "{GATE_FILE} has shape {:?}, expected (1, 1, {})",
                t.dims(),
                dec_channels + 1
            )));
        }
        params.gate_w = t.data()[..dec_channels].to_vec();
        params.gate_bias = t.data()[dec_channels];
    }
    let p = dir.join(P_SELF_FILE);
    if p.exists() {
        params.p_self = Some(tensor_to_matrix(
            &read_tensor(&p)?,
            embed_dim,
            dec_channels,
            P_SELF_FILE,
        )?);
    }
    Ok(params)
}
