//! Dense f64 tensors, a tape-based reverse-mode autodiff graph, parameter
//! storage, a finite-difference gradient checker and the Adam optimizer.

mod gradcheck;
mod graph;
mod kernels;
mod opcheck;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckOptions};
pub use graph::{Gradients, Graph, Var, MASKED_LOGIT};
pub use opcheck::operator_gradient_errors;
pub use optim::{adam_step, cosine_lr, AdamConfig, OptimizerState};
pub use params::{Initializer, ParamGrads, ParamStore};

use crate::error::{shape_err, Result};

/// Row-major dense array of doubles.
///
/// Rank 0 is a scalar, rank 1 is treated as a single row and higher ranks
/// are viewed as `(product of leading dims) x last dim` by matrix ops.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return shape_err(
                    "Tensor::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                );
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view: number of rows.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Matrix view: number of columns (size of the last axis).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[r - 1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(
                "Tensor::reshaped",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}
