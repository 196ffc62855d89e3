//! Dense f64 tensors with reverse-mode differentiation and the optimizer.

mod adamw;
mod chol;
mod init;
mod params;
mod tape;
mod tape_ops;

pub use adamw::{AdamWConfig, AdamWState};
pub use chol::{cholesky, solve_lower, solve_upper};
pub use init::ParamInit;
pub use params::{BoundParams, GradMap, ParamStore};
pub use tape::{Gradients, Tape, VarId};

use crate::error::{Error, Result};
use std::sync::Arc;

/// An immutable n-dimensional array of 64-bit floats, stored contiguously in
/// row-major order. Cloning is cheap (the buffer is shared).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; n]) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor { shape: vec![v.len()], data: Arc::new(v) }
    }

    /// Row-major matrix constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows, treating 1-D tensors as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns, treating 1-D tensors as a single row.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {} elements as {:?}", self.data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Replace the underlying buffer, keeping the shape. Used by the optimizer.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }
}

/// Max absolute difference between two equally-sized tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.numel(), b.numel());
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
