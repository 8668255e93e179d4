//! Named parameter registry with deterministic initialization.
//!
//! Parameters are registered in a fixed order (the order the model declares
//! them); initialization draws from one seeded stream in that order, so a
//! given (architecture, seed) pair always produces identical weights.
//! Optimizer state and checkpoints key off the same names and order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a parameter initializes and what role it plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrix, `rows` in, `cols` out: U(-b, b) with
    /// b = sqrt(6 / (fan_in + fan_out)).
    Weight,
    /// Zeros.
    Bias,
    /// Ones (layer norm gain).
    Gain,
    /// Learnable embedding rows: N(0, 1) scaled by 0.02.
    Proposal,
}

struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, rows: usize, cols: usize) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            tensor: Tensor::zeros(rows, cols).with_grad(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    /// Registration-order index of `name`, stable across the store's life.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|e| (e.name.as_str(), &mut e.tensor))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Deterministic initialization: one seeded stream, entries in
    /// registration order, draw count fixed by each tensor's size.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            let (rows, cols) = e.tensor.shape();
            let data = e.tensor.data_mut();
            match e.kind {
                ParamKind::Weight => {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    for v in data.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::Bias => data.iter_mut().for_each(|v| *v = 0.0),
                ParamKind::Gain => data.iter_mut().for_each(|v| *v = 1.0),
                ParamKind::Proposal => {
                    for v in data.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = 0.02 * z;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// L2 norm over every gradient coordinate of every parameter.
    pub fn global_grad_norm(&self) -> f64 {
        let mut s = 0.0;
        for e in &self.entries {
            if let Some(g) = &e.tensor.grad {
                for &x in g {
                    s += x * x;
                }
            }
        }
        s.sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.tensor.grad {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn any_nonfinite_grad(&self) -> bool {
        self.entries.iter().any(|e| {
            e.tensor
                .grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()))
        })
    }
}
