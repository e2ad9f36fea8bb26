//! Dense row-major tensors of 64-bit reals.
//!
//! Tensors are immutable values: every operation returns a new tensor.
//! Storage is reference counted, so cloning a tensor (for example when model
//! parameters are placed on a fresh segment tape) shares the buffer instead
//! of copying it. The differentiable primitives live on the tape in
//! [`crate::autodiff`]; the helpers here are plain arithmetic used by
//! optimizer updates, projections, and test oracles.

use std::sync::Arc;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::shape("tensor", "zero dimension"));
        }
        if numel != data.len() {
            return Err(CoreError::shape(
                "tensor",
                format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Accounted storage: 8 bytes per element.
    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::shape(
                "as_scalar",
                format!("shape {:?} is not a scalar", self.shape),
            ))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when this tensor's buffer is shared with at least one other
    /// tensor (used by the tape to skip double-accounting shared storage).
    pub fn storage_shared(&self) -> bool {
        Arc::strong_count(&self.data) > 1
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// a + k*b, the shape of `self`.
    pub fn add_scaled(&self, other: &Tensor, k: f64) -> Result<Tensor> {
        self.zip_map(other, "add_scaled", |a, b| a + k * b)
    }

    pub fn sign(&self) -> Tensor {
        self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Coordinatewise clamp of `self` into `[center - r, center + r]`.
    pub fn clamp_around(&self, center: &Tensor, r: f64) -> Result<Tensor> {
        self.zip_map(center, "clamp_around", |v, c| v.clamp(c - r, c + r))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum_values(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sumsq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sumsq().sqrt()
    }

    pub fn linf_dist(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "linf_dist",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn l2_dist(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.l2_norm())
    }

    /// Squared Euclidean distance.
    pub fn sq_dist(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.sumsq())
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_by_lowest_index() {
        let t = Tensor::vector(vec![1.0, 1.0, 0.5]);
        assert_eq!(t.argmax(), 0);
    }

    #[test]
    fn distance_helpers() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.l2_dist(&b).unwrap(), 5.0);
        assert_eq!(a.linf_dist(&b).unwrap(), 4.0);
        assert_eq!(a.sq_dist(&b).unwrap(), 25.0);
    }
}
