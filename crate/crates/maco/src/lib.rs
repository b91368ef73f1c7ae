//! Multi-agent combinatorial optimization by parallel autoregressive
//! construction.
//!
//! All agents propose one action per decoding step; a priority-based conflict
//! handler keeps at most one winner per non-shareable node and everyone else
//! falls back to a no-op. The crate bundles three environments (min-max
//! heterogeneous CVRP, open pickup-and-delivery, flexible flow shop), an
//! attention policy over the shared autodiff core, a REINFORCE trainer with a
//! shared per-instance baseline, classical baselines with exhaustive oracles,
//! and deterministic instance/trace/report serialization.
//!
//! Batch loops run on rayon when the default `parallel` feature is enabled
//! and fall back to plain iteration otherwise; results are identical either
//! way because work is merged in index order.

pub mod baselines;
pub mod batch;
pub mod env;
pub mod io;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod trainer;
