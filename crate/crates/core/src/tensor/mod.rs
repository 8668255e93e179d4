//! Reverse-mode automatic differentiation over 2D f64 tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation evaluates eagerly and
//! records a node, so control flow in host code (matching, slicing by runtime
//! query counts) needs no special casing. [`Graph::backward`] walks the tape
//! once in reverse. Graphs are rebuilt per step; parameters live outside in
//! [`Tensor`]s and are bound as leaves, sharing storage instead of copying.

pub mod check;
pub mod graph;
pub mod kernels;

pub use check::{grad_check, grad_check_sampled};
pub use graph::{Graph, TensorId};

use std::sync::Arc;

use crate::error::{Error, Result};

/// A 2D f64 tensor with optional gradient storage.
///
/// Data is row-major behind an `Arc` so a training graph can bind it as a
/// leaf without copying; mutation goes through [`Tensor::data_mut`], which is
/// copy-on-write and therefore cheap once no graph holds the buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn share(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let len = self.len();
        assert_eq!(g.len(), len);
        let buf = self.grad.get_or_insert_with(|| vec![0.0; len]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}
