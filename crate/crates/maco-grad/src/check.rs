//! Finite-difference gradient checking.
//!
//! The numeric gradient only re-evaluates the loss closure, never the tape,
//! so it is an independent oracle for backward implementations.

use crate::params::{GradAccum, ParamStore};

/// Central-difference gradient of `f` with respect to every parameter scalar.
pub fn central_difference<F>(store: &ParamStore, mut f: F, h: f64) -> GradAccum
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut out = GradAccum::zeros_like(store);
    for idx in 0..store.len() {
        for j in 0..store.value(idx).numel() {
            let orig = store.value(idx).data()[j];
            work.value_mut(idx).data_mut()[j] = orig + h;
            let fp = f(&work);
            work.value_mut(idx).data_mut()[j] = orig - h;
            let fm = f(&work);
            work.value_mut(idx).data_mut()[j] = orig;
            out.of_mut(idx)[j] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

/// Largest relative error between two gradient sets, with an absolute floor
/// so near-zero gradients compare on absolute terms.
pub fn max_relative_error(store: &ParamStore, analytic: &GradAccum, numeric: &GradAccum) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..store.len() {
        for (a, n) in analytic.of(idx).iter().zip(numeric.of(idx)) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matches_hand_derivative_of_cubic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(2.0));
        let g = central_difference(&store, |s| s.get("x").unwrap().data()[0].powi(3), 1e-5);
        assert!((g.of(0)[0] - 12.0).abs() < 1e-6);
    }
}
