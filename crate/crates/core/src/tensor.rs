//! Dense rank-3 feature maps in HWC row-major layout, plus the window
//! geometry shared by kernel generation and assembly.
//!
//! A feature map is stored as `data[(row * width + col) * channels + ch]`,
//! so the channel vector of every spatial position is contiguous. Neighbour
//! reads outside the map are clamped to the nearest edge pixel.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Result, SapaError};

/// Scalar type the library computes in. Implemented for `f32` (default) and
/// `f64` (used for gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense `height x width x channels` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from row-major `(row, col, channel)` data.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(SapaError::config(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| SapaError::config("tensor dimensions overflow"))?;
        if data.len() != expected {
            return Err(SapaError::config(format!(
                "data length {} does not match {height}x{width}x{channels} = {expected}",
                data.len()
            )));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Tensor filled with `value`.
    ///
    /// Panics if any dimension is zero.
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "tensor dimensions must be positive"
        );
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    /// Tensor whose every pixel holds a copy of `vector`.
    pub fn broadcast(height: usize, width: usize, vector: &[T]) -> Self {
        let mut t = Self::zeros(height, width, vector.len());
        for px in t.data.chunks_exact_mut(vector.len()) {
            px.copy_from_slice(vector);
        }
        t
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    t.data[(row * width + col) * channels + ch] = f(row, col, ch);
                }
            }
        }
        t
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Checked element read.
    pub fn get(&self, row: usize, col: usize, ch: usize) -> Result<T> {
        if row >= self.height || col >= self.width || ch >= self.channels {
            return Err(SapaError::Index {
                row,
                col,
                ch,
                height: self.height,
                width: self.width,
                channels: self.channels,
            });
        }
        Ok(self.data[(row * self.width + col) * self.channels + ch])
    }

    /// Channel vector at `(row, col)`. Panics when out of bounds.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Flat pixel index of `(row + du, col + dv)` clamped to the map.
    #[inline]
    pub fn clamped_index(&self, row: usize, col: usize, du: isize, dv: isize) -> usize {
        clamp_offset(row, du, self.height) * self.width + clamp_offset(col, dv, self.width)
    }

    /// Channel vector of the window neighbour at `center + offset`, with
    /// clamp-to-edge border handling.
    pub fn window_vector(&self, center: (usize, usize), offset: (isize, isize)) -> Result<&[T]> {
        let (row, col) = center;
        if row >= self.height || col >= self.width {
            return Err(SapaError::Index {
                row,
                col,
                ch: 0,
                height: self.height,
                width: self.width,
                channels: self.channels,
            });
        }
        let idx = self.clamped_index(row, col, offset.0, offset.1);
        Ok(&self.data[idx * self.channels..(idx + 1) * self.channels])
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts the element type (`f32 <-> f64`).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from(v).expect("float conversion"))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims(), other.dims(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

#[inline]
fn clamp_offset(base: usize, offset: isize, len: usize) -> usize {
    let v = base as isize + offset;
    v.clamp(0, len as isize - 1) as usize
}

/// Maps an output location to its source location at ratio `ratio`.
#[inline]
pub fn project_location(l_prime: (usize, usize), ratio: usize) -> (usize, usize) {
    (l_prime.0 / ratio, l_prime.1 / ratio)
}

/// Square `k x k` window centred on a decoder location.
///
/// Offsets are enumerated row-major: `(u, v)` for `u, v` in `-r..=r`, so
/// offset `(-r, -r)` (the top-left weight) has index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    k: usize,
}

impl Window {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(SapaError::config(format!(
                "kernel size must be odd and positive, got {k}"
            )));
        }
        Ok(Window { k })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn radius(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Number of offsets, `k * k`.
    #[inline]
    pub fn len(&self) -> usize {
        self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize)> + Clone {
        let r = self.radius();
        (-r..=r).flat_map(move |u| (-r..=r).map(move |v| (u, v)))
    }

    /// Position of `(u, v)` in [`Window::offsets`] order.
    pub fn offset_index(&self, offset: (isize, isize)) -> Option<usize> {
        let r = self.radius();
        let (u, v) = offset;
        if u.abs() > r || v.abs() > r {
            return None;
        }
        Some(((u + r) as usize) * self.k + (v + r) as usize)
    }
}
