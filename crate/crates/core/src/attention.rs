//! Attention with a shared ReLU projection of query and key.
//!
//! Scores are `α_ij = ReLU(Q_i W) · ReLU(K_j W)` with no temperature, and
//! the output row `i` is the softmax-weighted sum of value rows. The same
//! operator serves word-level soft matching, the fully-aware attention over
//! concatenated word histories, and context self-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::recurrent::SeqMask;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct AttnParams {
    /// `d_qk × d_attn`, applied to both query and key.
    pub w: ParamId,
    pub d_qk: usize,
    pub d_attn: usize,
    /// Input dropout applied to query, key and value while training.
    pub dropout: f64,
}

impl AttnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_qk: usize,
        d_attn: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / d_qk as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(&[d_qk, d_attn], bound, rng).with_grad(true),
        );
        AttnParams {
            w,
            d_qk,
            d_attn,
            dropout,
        }
    }
}

fn check_width(tape: &Tape<'_>, op: &'static str, v: Var, width: usize) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != width {
        return Err(Error::dim(op, &s, &[s.first().copied().unwrap_or(0), width]));
    }
    Ok(())
}

/// Row-stochastic `n×m` attention weights over the unmasked keys.
pub fn attn_weights(
    tape: &Tape<'_>,
    p: &AttnParams,
    query: Var,
    key: Var,
    key_mask: &SeqMask,
) -> Result<Var> {
    check_width(tape, "attn query", query, p.d_qk)?;
    check_width(tape, "attn key", key, p.d_qk)?;
    let (n, m) = (tape.rows(query), tape.rows(key));
    if key_mask.total() != m {
        return Err(Error::dim("attn key mask", &[m], &[key_mask.total()]));
    }
    if !key_mask.as_slice().iter().any(|&b| b) {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let w = tape.param(p.w)?;
    // Self-attention passes the same node as query and key; dropout masks
    // are drawn separately for each role.
    let q_in = tape.dropout(query, p.dropout, true)?;
    let q_proj = tape.relu(tape.matmul(q_in, w)?)?;
    let k_proj = if key == query && !tape.is_training() {
        q_proj
    } else {
        let k_in = tape.dropout(key, p.dropout, true)?;
        tape.relu(tape.matmul(k_in, w)?)?
    };
    let scores = tape.matmul(q_proj, tape.transpose(k_proj)?)?;
    tape.softmax_rows(scores, Some(&key_mask.broadcast_rows(n)))
}

/// `n×d_v` output; row `i` is `Σ_j ᾱ_ij V_j`.
pub fn attn(
    tape: &Tape<'_>,
    p: &AttnParams,
    query: Var,
    key: Var,
    value: Var,
    key_mask: &SeqMask,
) -> Result<Var> {
    if tape.rows(value) != tape.rows(key) {
        return Err(Error::dim(
            "attn value",
            &tape.shape(key),
            &tape.shape(value),
        ));
    }
    let weights = attn_weights(tape, p, query, key, key_mask)?;
    let v = tape.dropout(value, p.dropout, true)?;
    tape.matmul(weights, v)
}

/// Each context word as a mixture of question word embeddings.
pub fn word_level_soft_match(
    tape: &Tape<'_>,
    p: &AttnParams,
    context_emb: Var,
    question_emb: Var,
    question_mask: &SeqMask,
) -> Result<Var> {
    attn(tape, p, context_emb, question_emb, question_emb, question_mask)
}

#[derive(Debug, Clone)]
pub struct SummaryParams {
    /// `d × 1` scoring vector.
    pub v: ParamId,
    pub d: usize,
}

impl SummaryParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d as f64).sqrt();
        let v = store.add(
            format!("{name}.v"),
            Tensor::uniform(&[d, 1], bound, rng).with_grad(true),
        );
        SummaryParams { v, d }
    }
}

/// `1×d` weighted sum of question rows with weights `softmax(Q v)`.
pub fn question_summary(tape: &Tape<'_>, p: &SummaryParams, q_u: Var, mask: &SeqMask) -> Result<Var> {
    check_width(tape, "question_summary", q_u, p.d)?;
    let m = tape.rows(q_u);
    if m == 0 || mask.total() != m {
        return Err(Error::Degenerate("empty question".into()));
    }
    if !mask.as_slice().iter().any(|&b| b) {
        return Err(Error::Degenerate("question has no unmasked tokens".into()));
    }
    let scores = tape.transpose(tape.matmul(q_u, tape.param(p.v)?)?)?;
    let alpha = tape.softmax_rows(scores, Some(mask.as_slice()))?;
    tape.matmul(alpha, q_u)
}
