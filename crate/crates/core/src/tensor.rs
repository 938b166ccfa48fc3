//! Dense rank-4 arrays in batch-height-width-channel order.
//!
//! One layout everywhere: row-major over (batch, height, width, channels),
//! so the channel values of a cell are contiguous. Convolution kernels reuse
//! the same struct with dims read as (out-channels, kernel-h, kernel-w,
//! in-channels).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::fmt;

/// Dimensions of a [`Tensor4`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape4 {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape4 {
            batch,
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of (batch, row, col, channel).
    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.height + y) * self.width + x) * self.channels + c
    }

    /// Total (batch, y, x) positions; channel vectors are contiguous per
    /// cell, so flat storage is `cells()` blocks of `channels` values.
    pub fn cells(&self) -> usize {
        self.batch * self.height * self.width
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.height, self.width, self.channels
        )
    }
}

/// Dense rank-4 value: the universal payload of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
    /// Marks parameters; the tape records gradients for every value it
    /// holds, this flag documents intent when registering leaves.
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
        }
    }

    /// Wrap existing data; fails unless `data.len()` matches the shape.
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor4::from_vec",
                reason: format!("data length {} != shape {} ({})", data.len(), shape, shape.len()),
            });
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.index(b, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.shape.index(b, y, x, c);
        self.data[i] = v;
    }

    /// NaN/Inf are rejected at op boundaries rather than propagated.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Lossy element-type conversion (used when saving f64 runs as f32
    /// checkpoints and when loading checkpoints into verification runs).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
