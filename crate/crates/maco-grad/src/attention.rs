use crate::error::GradError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Projection weights of one attention layer, each d x d.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head scaled dot-product attention.
///
/// `q` is (A,d), `k` and `v` are (B,d). The optional mask is a row-major AxB
/// feasibility grid shared by all heads; a fully-masked query row is an error.
/// The optional bias adds `scale[h] * bias` to the pre-softmax scores of head
/// h, with `bias` constant and each scale a learnable 1x1 node.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<&[bool]>,
    bias: Option<(&Tensor, &[Var])>,
) -> Result<Var, GradError> {
    let [a_rows, d] = tape.shape(q);
    let [b_rows, dk] = tape.shape(k);
    if dk != d || tape.shape(v) != [b_rows, d] {
        return Err(GradError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!(
                "q {}x{}, k {}x{}, v {}x{}",
                a_rows, d, b_rows, dk, tape.shape(v)[0], tape.shape(v)[1]
            ),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(GradError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("{d} dims not divisible into {heads} heads"),
        });
    }
    if let Some(m) = mask {
        if m.len() != a_rows * b_rows {
            return Err(GradError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("mask length {} for {}x{}", m.len(), a_rows, b_rows),
            });
        }
    }
    if let Some((bmat, scales)) = bias {
        if bmat.shape() != [a_rows, b_rows] || scales.len() != heads {
            return Err(GradError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!(
                    "bias {}x{} with {} scales for {} heads",
                    bmat.rows(),
                    bmat.cols(),
                    scales.len(),
                    heads
                ),
            });
        }
    }

    let dh = d / heads;
    let qp = tape.matmul(q, w.wq)?;
    let kp = tape.matmul(k, w.wk)?;
    let vp = tape.matmul(v, w.wv)?;
    let all_true; // softmax still needs a mask slice when none is given
    let mask = match mask {
        Some(m) => m,
        None => {
            all_true = vec![true; a_rows * b_rows];
            &all_true
        }
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some((bmat, scales)) = bias {
            scores = tape.add_scaled_const(scores, bmat, scales[h])?;
        }
        let attn = tape.masked_softmax(scores, mask)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, w.wo)
}
