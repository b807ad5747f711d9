//! Dense channel × height × width tensors.
//!
//! Every signal in the pipeline (start noise, keys, salts, images, biases and
//! tamper fields) is a [`LatentTensor`]. Images use the same geometry as the
//! noise space: the toy generators work directly in pixel space, so there is
//! no encoder between the two.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape as `[channels, height, width]`.
pub type Shape = [usize; 3];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl std::fmt::Debug for LatentTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentTensor")
            .field("shape", &self.shape)
            .field("mean_square", &self.mean_square())
            .finish()
    }
}

impl LatentTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::param(format!(
                "tensor of shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1],
            data: vec![value],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value at `(channel, row, col)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        let [_, h, w] = self.shape;
        (c * h + y) * w + x
    }

    pub fn check_shape(&self, expected: Shape) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::Shape {
                expected,
                actual: self.shape,
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.check_shape(self.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean of squared elements, the per-element second-order moment.
    pub fn mean_square(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        other.check_shape(self.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamp every element into `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

pub(crate) fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Mean of a non-empty set of same-shaped tensors.
pub fn mean_of(tensors: &[LatentTensor]) -> Result<LatentTensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::param("mean of an empty tensor set"))?;
    let mut acc = LatentTensor::zeros(first.shape());
    for t in tensors {
        t.check_shape(first.shape())?;
        for (a, v) in acc.data.iter_mut().zip(&t.data) {
            *a += v;
        }
    }
    Ok(acc.scale(1.0 / tensors.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_channel_major() {
        let mut t = LatentTensor::zeros([2, 3, 4]);
        t.set(1, 2, 3, 7.0);
        assert_eq!(t.as_slice()[(1 * 3 + 2) * 4 + 3], 7.0);
        assert_eq!(t.at(1, 2, 3), 7.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(LatentTensor::from_vec([1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = LatentTensor::zeros([1, 2, 2]);
        let b = LatentTensor::zeros([1, 4, 1]);
        assert!(matches!(a.sub(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn moments() {
        let t = LatentTensor::from_vec([1, 1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(t.mean(), 0.0);
        assert_eq!(t.mean_square(), 2.5);
        assert_eq!(t.max_abs(), 2.0);
    }
}
