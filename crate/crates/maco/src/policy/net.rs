//! Transformer pieces shared by the encoder, the communication block, and
//! the pointer decoder. Everything runs on a [`Tape`] so gradients reach
//! every weight.

use maco_grad::{multi_head_attention, AttentionWeights, GradError, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-row root-mean-square scaling.
    Rms,
    /// Per-column standardization over rows.
    Instance,
}

pub fn normalize(tape: &mut Tape, x: Var, gain: Var, kind: NormKind) -> Result<Var, GradError> {
    match kind {
        NormKind::Rms => tape.rms_norm(x, gain),
        NormKind::Instance => tape.instance_norm(x, gain),
    }
}

/// Weights of one pre-norm residual block. `bias_scales` stays empty unless
/// the block mixes a constant score bias into its attention heads.
pub struct BlockWeights {
    pub norm1: Var,
    pub attn: AttentionWeights,
    pub bias_scales: Vec<Var>,
    pub norm2: Var,
    pub mlp_w1: Var,
    pub mlp_w2: Var,
}

fn mlp(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var, GradError> {
    let hidden = tape.matmul(x, w1)?;
    let act = tape.relu(hidden)?;
    tape.matmul(act, w2)
}

/// x + MLP(norm(x)), the feed-forward half of a pre-norm block.
pub fn ffn_residual(
    tape: &mut Tape,
    x: Var,
    norm2: Var,
    w1: Var,
    w2: Var,
    kind: NormKind,
) -> Result<Var, GradError> {
    let normed = normalize(tape, x, norm2, kind)?;
    let f = mlp(tape, normed, w1, w2)?;
    tape.add(x, f)
}

/// Pre-norm self-attention block: x + MHA(norm(x)) followed by the
/// feed-forward residual.
pub fn self_block(
    tape: &mut Tape,
    x: Var,
    w: &BlockWeights,
    heads: usize,
    kind: NormKind,
) -> Result<Var, GradError> {
    let normed = normalize(tape, x, w.norm1, kind)?;
    let mixed = multi_head_attention(tape, normed, normed, normed, &w.attn, heads, None, None)?;
    let x = tape.add(x, mixed)?;
    ffn_residual(tape, x, w.norm2, w.mlp_w1, w.mlp_w2, kind)
}

/// Attention half of a cross block: x + MHA(norm(x), kv_normed) with an
/// optional per-head score bias. The feed-forward half is applied by the
/// caller once both sides have attended.
pub fn cross_attend(
    tape: &mut Tape,
    x: Var,
    kv_normed: Var,
    w: &BlockWeights,
    heads: usize,
    kind: NormKind,
    bias: Option<&Tensor>,
) -> Result<Var, GradError> {
    let normed = normalize(tape, x, w.norm1, kind)?;
    let scored = bias.map(|b| (b, w.bias_scales.as_slice()));
    let mixed = multi_head_attention(tape, normed, kv_normed, kv_normed, &w.attn, heads, None, scored)?;
    tape.add(x, mixed)
}

/// Queries from agent embeddings and step dynamics:
/// q = concat(h_agent, delta W_delta, e W_e) W_q.
pub fn build_context(
    tape: &mut Tape,
    h_agents: Var,
    delta: Var,
    env: Var,
    w_delta: Var,
    w_env: Var,
    w_q: Var,
) -> Result<Var, GradError> {
    let [m, _] = tape.shape(h_agents);
    let dproj = tape.matmul(delta, w_delta)?;
    let eproj = tape.matmul(env, w_env)?;
    let espread = tape.broadcast_rows(eproj, m)?;
    let ctx = tape.concat_cols(&[h_agents, dproj, espread])?;
    tape.matmul(ctx, w_q)
}

pub struct PointerWeights {
    pub attn: AttentionWeights,
    pub xi_k: Var,
    pub xi_v: Var,
    pub w_l: Var,
    pub xi_l: Var,
}

/// Masked glimpse plus bounded pointer logits.
///
/// The query attends over nodes shifted by the dynamic projections, then
/// scores every node as beta * tanh(q k^T / sqrt(d)). Returns the softmax
/// grid and the pre-mask logits.
pub fn pointer(
    tape: &mut Tape,
    q: Var,
    h_nodes: Var,
    xi: Var,
    w: &PointerWeights,
    heads: usize,
    beta: f64,
    mask: &[bool],
) -> Result<(Var, Var), GradError> {
    let [_, d] = tape.shape(q);
    let key_shift = tape.matmul(xi, w.xi_k)?;
    let keys = tape.add(h_nodes, key_shift)?;
    let val_shift = tape.matmul(xi, w.xi_v)?;
    let vals = tape.add(h_nodes, val_shift)?;
    let glimpse = multi_head_attention(tape, q, keys, vals, &w.attn, heads, Some(mask), None)?;

    let pointer_keys_static = tape.matmul(h_nodes, w.w_l)?;
    let pointer_shift = tape.matmul(xi, w.xi_l)?;
    let pointer_keys = tape.add(pointer_keys_static, pointer_shift)?;
    let scores = tape.matmul_nt(glimpse, pointer_keys)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let logits = tape.scaled_tanh_clip(scaled, beta)?;
    let probs = tape.masked_softmax(logits, mask)?;
    Ok((probs, logits))
}

/// Uniform init in +-1/sqrt(rows), the fan-in of a left-multiplied matrix.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("length matches shape")
}
