use serde::{Deserialize, Serialize};

use crate::params::{GradAccum, ParamStore};

/// Adam with bias correction. Moment buffers are aligned with the store the
/// optimizer was created for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..store.len()).map(|i| vec![0.0; store.value(i).numel()]).collect(),
            v: (0..store.len()).map(|i| vec![0.0; store.value(i).numel()]).collect(),
        }
    }

    /// Moment buffers rearranged so entry i of the result is the buffer at
    /// original index `perm[i]`; keeps the optimizer aligned when parameters
    /// are serialized in a different order than they were inserted.
    pub(crate) fn permuted(&self, perm: &[usize]) -> Adam {
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m: perm.iter().map(|&i| self.m[i].clone()).collect(),
            v: perm.iter().map(|&i| self.v[i].clone()).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let g = grads.of(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_mut(idx).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
