//! Sublayers as functions of tape variables.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// `x·wᵀ (+ b)` for `w` of shape `[out×in]`.
pub fn linear(tape: &Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul_nt(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Softmax-weighted sum of the rows of `h`, scored by `(h·projᵀ)·query`.
/// Returns a `[1×d]` row.
pub fn attentive_pooling(tape: &Tape, h: Var, query: Var, proj: Var) -> Result<Var> {
    let shape = tape.shape(h);
    let (len, d) = match shape[..] {
        [l, d] => (l, d),
        _ => return Err(Error::Dimension(format!("pooling input must be a matrix, got {shape:?}"))),
    };
    if len == 0 {
        return Err(Error::Dimension("attentive pooling over zero rows".into()));
    }
    let projected = linear(tape, h, proj, None)?;
    let scores = tape.matmul(projected, tape.reshape(query, &[d, 1])?)?;
    let weights = tape.softmax_rows(tape.reshape(scores, &[1, len])?)?;
    tape.matmul(weights, h)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product self-attention. `keep[j] == false` marks
/// padded key positions.
pub fn self_attention(tape: &Tape, h: Var, p: &AttentionVars, n_heads: usize, keep: Option<&[bool]>) -> Result<Var> {
    let d = *tape.shape(h).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {n_heads} heads")));
    }
    let dh = d / n_heads;
    let q = linear(tape, h, p.wq, Some(p.bq))?;
    let k = linear(tape, h, p.wk, Some(p.bk))?;
    let v = linear(tape, h, p.wv, Some(p.bv))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let scores = tape.scale(tape.matmul_nt(qh, kh)?, scale);
        let weights = match keep {
            Some(mask) => tape.softmax_rows_masked(scores, mask)?,
            None => tape.softmax_rows(scores)?,
        };
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, merged, p.wo, Some(p.bo))
}

/// Activation between the two feed-forward matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnActivation {
    Gelu,
    /// Row softmax; turns the block into a normalized key-value memory.
    /// Used to check the correspondence in tests.
    SoftmaxRows,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Option<Var>,
    pub w2: Var,
    pub b2: Option<Var>,
}

/// `σ(x·W1ᵀ + b1)·W2 + b2` with `W1, W2` of shape `[d_ffn×d_model]`.
pub fn feed_forward(tape: &Tape, x: Var, p: &FfnVars, act: FfnActivation) -> Result<Var> {
    let hidden = linear(tape, x, p.w1, p.b1)?;
    let hidden = match act {
        FfnActivation::Gelu => tape.gelu(hidden),
        FfnActivation::SoftmaxRows => tape.softmax_rows(hidden)?,
    };
    let out = tape.matmul(hidden, p.w2)?;
    match p.b2 {
        Some(b) => tape.add_bias(out, b),
        None => Ok(out),
    }
}

/// `softmax(x·Kᵀ)·V`.
pub fn memory_network(tape: &Tape, x: Var, keys: Var, values: Var) -> Result<Var> {
    let scores = tape.matmul_nt(x, keys)?;
    tape.matmul(tape.softmax_rows(scores)?, values)
}

/// `softmax(h·K_zᵀ/√d)·V_z`, single head with `d` the model width.
pub fn knowledge_attention(tape: &Tape, h: Var, kz: Var, vz: Var) -> Result<Var> {
    let kshape = tape.shape(kz);
    if kshape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::Retrieval("knowledge attention over zero retrieved entries".into()));
    }
    if tape.shape(vz) != kshape {
        return Err(Error::Dimension(format!(
            "retrieved keys {kshape:?} and values {:?} differ",
            tape.shape(vz)
        )));
    }
    let d = kshape[1];
    let scores = tape.scale(tape.matmul_nt(h, kz)?, 1.0 / (d as f64).sqrt());
    tape.matmul(tape.softmax_rows(scores)?, vz)
}
