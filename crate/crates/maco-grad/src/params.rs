use std::collections::HashMap;

use crate::error::GradError;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameters with stable insertion order. Paths are dotted strings
/// such as `enc.0.attn.wq`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    paths: Vec<String>,
    values: Vec<Tensor>,
    by_path: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> usize {
        assert!(
            !self.by_path.contains_key(path),
            "duplicate parameter path {path}"
        );
        let idx = self.paths.len();
        self.paths.push(path.to_string());
        self.values.push(value);
        self.by_path.insert(path.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.by_path.get(path).copied()
    }

    pub fn path(&self, idx: usize) -> &str {
        &self.paths[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.by_path.get(path).map(|&i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.paths.iter().map(|p| p.as_str()).zip(self.values.iter())
    }

    /// Put every parameter on the tape as a leaf, in insertion order.
    pub fn stage(&self, tape: &mut Tape) -> Result<Vec<Var>, GradError> {
        self.values.iter().map(|t| tape.leaf(t)).collect()
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradAccum {
    data: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn of(&self, idx: usize) -> &[f64] {
        &self.data[idx]
    }

    pub fn of_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx]
    }

    /// Add the tape gradients of staged parameter leaves.
    pub fn add_staged(&mut self, staged: &[Var], grads: &Gradients) {
        for (buf, var) in self.data.iter_mut().zip(staged) {
            let g = grads.of(*var);
            if g.is_empty() {
                continue;
            }
            for (d, s) in buf.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for buf in &mut self.data {
            for x in buf.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
