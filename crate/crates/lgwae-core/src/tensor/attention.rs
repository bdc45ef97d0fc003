//! Multi-head scaled dot-product attention composed from tape primitives.

use alloc::vec::Vec;

use super::tape::{Tape, Value};
use super::TensorError;
use crate::math;

/// Projection parameters, already bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Value,
    pub bq: Value,
    pub wk: Value,
    pub bk: Value,
    pub wv: Value,
    pub bv: Value,
    pub wo: Value,
    pub bo: Value,
}

/// Standard multi-head attention: project, split heads along the feature
/// axis, softmax(QKᵀ/√dₕ)·V per head, concatenate, project out. Fully
/// differentiable through the tape; reduction order is fixed.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Value,
    keys: Value,
    values: Value,
    params: &AttentionParams,
    n_heads: usize,
) -> Result<Value, TensorError> {
    let d_model = *tape.shape(queries).last().ok_or(TensorError::InvalidShape {
        op: "multi_head_attention",
        shape: tape.shape(queries).to_vec(),
        detail: "queries need a feature axis",
    })?;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(TensorError::HeadSplit { d_model, n_heads });
    }
    let d_head = d_model / n_heads;
    let scale = 1.0 / math::sqrt(d_head as f64);

    let q_proj = tape.matmul(queries, params.wq)?;
    let q = tape.add(q_proj, params.bq)?;
    let k_proj = tape.matmul(keys, params.wk)?;
    let k = tape.add(k_proj, params.bk)?;
    let v_proj = tape.matmul(values, params.wv)?;
    let v = tape.add(v_proj, params.bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * d_head, d_head)?;
        let kh = tape.slice(k, 1, h * d_head, d_head)?;
        let vh = tape.slice(v, 1, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale)?;
        let weights = tape.softmax_lastdim(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    let out = tape.matmul(merged, params.wo)?;
    tape.add(out, params.bo)
}
