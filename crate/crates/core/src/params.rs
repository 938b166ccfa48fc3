//! Ordered, named parameter tensors.
//!
//! Declaration order is normative: checkpoints serialize entries in this
//! order and optimizer state is indexed by position, so the order is part of
//! the on-disk contract.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor4<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument {
                op: "param_set",
                reason: format!("duplicate parameter '{}'", name),
            });
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor4<T> {
        &self.entries[index].1
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor4<T> {
        &mut self.entries[index].1
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}

/// He fan-in normal initialization for a convolution kernel laid out as
/// (cout, kh, kw, cin); draws in storage order from the shared stream.
pub fn he_conv_init<T: Scalar>(rng: &mut ChaCha20Rng, shape: Shape4) -> Tensor4<T> {
    let fan_in = (shape.height * shape.width * shape.channels) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..shape.len())
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    Tensor4::from_vec(shape, data).expect("length matches by construction")
}

/// Uniform draw helper for tests and synthetic fixtures.
pub fn uniform_tensor<T: Scalar>(
    rng: &mut ChaCha20Rng,
    shape: Shape4,
    lo: f64,
    hi: f64,
) -> Tensor4<T> {
    let data = (0..shape.len())
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor4::from_vec(shape, data).expect("length matches by construction")
}
