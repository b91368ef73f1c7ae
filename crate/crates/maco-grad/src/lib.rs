//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! record once, from an explicit scalar root, and returns per-node gradients.
//! Parameters live in a [`ParamStore`] keyed by dotted paths so they can be
//! staged onto a tape, updated by [`Adam`], and round-tripped through
//! checkpoint files bit-exactly.

mod adam;
mod attention;
mod checkpoint;
pub mod check;
mod error;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use attention::{multi_head_attention, AttentionWeights};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, LoadedCheckpoint};
pub use error::GradError;
pub use params::{GradAccum, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon added inside the square root of both normalization ops.
pub const NORM_EPS: f64 = 1e-8;
