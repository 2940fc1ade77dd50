//! SAPT tensor files and binary PGM export.
//!
//! SAPT layout (little-endian, no padding):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SAPT"
//! 4       4     u32 version (= 1)
//! 8       4     u32 height
//! 12      4     u32 width
//! 16      4     u32 channels
//! 20      4*N   f32 payload, N = height * width * channels, (row, col, channel) order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SapaError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SAPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.data().len());
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        t.height() as u32,
        t.width() as u32,
        t.channels() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(SapaError::Truncated {
            offset: offset as u64,
            expected: 4,
            found: bytes.len().saturating_sub(offset) as u64,
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 {
        return Err(SapaError::Truncated {
            offset: 0,
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(SapaError::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"SAPT\"", &bytes[..4]),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(SapaError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let h = read_u32(bytes, 8)? as u64;
    let w = read_u32(bytes, 12)? as u64;
    let c = read_u32(bytes, 16)? as u64;
    for (dim, off) in [(h, 8u64), (w, 12), (c, 16)] {
        if dim == 0 {
            return Err(SapaError::Format {
                offset: off,
                message: "zero dimension".into(),
            });
        }
    }
    let payload = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= (usize::MAX - HEADER_LEN) as u64)
        .ok_or_else(|| SapaError::Format {
            offset: 8,
            message: format!("dimensions {h}x{w}x{c} overflow"),
        })?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < payload {
        return Err(SapaError::Truncated {
            offset: HEADER_LEN as u64 + found,
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(SapaError::Format {
            offset: HEADER_LEN as u64 + payload,
            message: format!("{} trailing bytes after payload", found - payload),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(h as usize, w as usize, c as usize, data)
}

pub fn write_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_tensor(&fs::read(path)?)
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM ("P5", maxval 255).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}
