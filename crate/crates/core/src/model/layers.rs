use tubeseg_autodiff::{batched_attention, Tape, Var};

use super::params::Bound;
use crate::error::Result;

/// `x·W (+ b)` over the last axis of a tensor of any rank ≥ 1.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let cin = *shape.last().expect("linear input has rank ≥ 1");
    let cout = tape.shape(w)[1];
    let rows = shape.iter().product::<usize>() / cin;
    let flat = tape.reshape(x, vec![rows, cin])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_along(y, b, 1)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = cout;
    Ok(tape.reshape(y, out_shape)?)
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, gain, bias)?)
}

/// Where an attention update draws its keys and values from.
#[derive(Debug, Clone, Copy)]
pub enum KeySource {
    /// Self-attention over the queries.
    Queries,
    /// Cross-attention to another sequence.
    Other(Var),
    /// Keys and values are the other sequence followed by the queries.
    OtherThenQueries(Var),
}

/// Pre-norm single-head attention with a residual:
/// `x + O(attn(Q·LN(x), K·LN(s), V·LN(s))) + b_O`.
///
/// Inputs are `[B×n×C]`; the batch axis pairs queries with their own keys.
pub fn attention_update(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    source: KeySource,
) -> Result<Var> {
    let xn = layer_norm(tape, p, &format!("{prefix}.ln_q"), x)?;
    let kv = match source {
        KeySource::Queries => xn,
        KeySource::Other(s) => layer_norm(tape, p, &format!("{prefix}.ln_kv"), s)?,
        KeySource::OtherThenQueries(s) => {
            let sn = layer_norm(tape, p, &format!("{prefix}.ln_kv"), s)?;
            tape.concat(&[sn, xn], 1)?
        }
    };
    let q = linear(tape, xn, p.var(&format!("{prefix}.wq"))?, None)?;
    let k = linear(tape, kv, p.var(&format!("{prefix}.wk"))?, None)?;
    let v = linear(tape, kv, p.var(&format!("{prefix}.wv"))?, None)?;
    let attended = batched_attention(tape, q, k, v)?;
    let out = linear(
        tape,
        attended,
        p.var(&format!("{prefix}.wo"))?,
        Some(p.var(&format!("{prefix}.bo"))?),
    )?;
    Ok(tape.add(x, out)?)
}

/// Pre-norm two-layer feed-forward with a residual.
pub fn ffn_update(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let xn = layer_norm(tape, p, &format!("{prefix}.ln"), x)?;
    let h = linear(
        tape,
        xn,
        p.var(&format!("{prefix}.w1"))?,
        Some(p.var(&format!("{prefix}.b1"))?),
    )?;
    let h = tape.relu(h);
    let out = linear(
        tape,
        h,
        p.var(&format!("{prefix}.w2"))?,
        Some(p.var(&format!("{prefix}.b2"))?),
    )?;
    Ok(tape.add(x, out)?)
}

/// 3×3 convolution plus per-channel bias on one `[C×H×W]` frame.
pub fn conv_bias(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d_3x3(x, p.var(&format!("{prefix}.weight"))?)?;
    Ok(tape.add_along(y, p.var(&format!("{prefix}.bias"))?, 0)?)
}
