//! Dense rank-4 `(n, c, h, w)` arrays of `f64` and the numerical kernels the
//! rest of the crate is built from.

mod activation;
mod batchnorm;
mod conv;
mod loss;
mod resize;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::error::{Error, Result};

pub use activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BatchNormStats, NormMode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use loss::mse_loss;
pub use resize::{resize_bilinear, resize_bilinear_backward};

/// Extent of a [`Tensor4`]: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(n, c, h, w)` array. All dimensions are at least one.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_dims(op: &'static str, shape: Shape) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::invalid(op, alloc::format!("all dimensions must be >= 1, got {shape}")));
    }
    Ok(())
}

impl Tensor4 {
    /// Zero-filled tensor. Panics if any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        check_dims("Tensor4::filled", shape).expect("tensor dimensions must be >= 1");
        Tensor4 { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        check_dims("Tensor4::from_vec", shape)?;
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor4::from_vec",
                alloc::format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        check_dims("Tensor4::random_uniform", shape).expect("tensor dimensions must be >= 1");
        let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// The `(h, w)` plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`, contiguous.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.expect_shape("Tensor4::zip_map", other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.expect_shape("Tensor4::add_assign", other.shape)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.expect_shape("Tensor4::max_abs_diff", other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, alloc::format!("expected {expected}, got {}", self.shape)));
        }
        Ok(())
    }

    /// Stacks tensors along the channel axis. Batch and spatial extents must agree.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no tensors to concatenate"))?
            .shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape("concat_channels", alloc::format!("{s} vs {first}")));
            }
            channels += s.c;
        }
        let shape = first.with_channels(channels);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor4>> {
        if sizes.iter().sum::<usize>() != self.shape.c || sizes.contains(&0) {
            return Err(Error::shape(
                "split_channels",
                alloc::format!("sizes {sizes:?} do not partition {} channels", self.shape.c),
            ));
        }
        let plane = self.shape.plane();
        let mut out: Vec<Tensor4> = sizes
            .iter()
            .map(|&c| Tensor4 {
                shape: self.shape.with_channels(c),
                data: Vec::with_capacity(self.shape.n * c * plane),
            })
            .collect();
        for n in 0..self.shape.n {
            let item = self.item(n);
            let mut start = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                part.data.extend_from_slice(&item[start * plane..(start + c) * plane]);
                start += c;
            }
        }
        Ok(out)
    }

    /// Copies channels `[start, start + count)`.
    pub fn channels(&self, start: usize, count: usize) -> Result<Tensor4> {
        if count == 0 || start + count > self.shape.c {
            return Err(Error::shape(
                "Tensor4::channels",
                alloc::format!("range {start}..{} out of {} channels", start + count, self.shape.c),
            ));
        }
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.n * count * plane);
        for n in 0..self.shape.n {
            data.extend_from_slice(&self.item(n)[start * plane..(start + count) * plane]);
        }
        Ok(Tensor4 { shape: self.shape.with_channels(count), data })
    }
}
