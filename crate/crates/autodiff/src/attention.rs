use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};

/// `softmax(Q·Kᵀ/√d)·V` for `Q: [q×d]`, `K: [k×d]`, `V: [k×d_v]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_dims(tape, q, k, v, 2)?;
    let d = tape.shape(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

/// Batched form over a leading axis: `[b×q×d]`, `[b×k×d]`, `[b×k×d_v]`.
pub fn batched_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_dims(tape, q, k, v, 3)?;
    let d = tape.shape(q)[2] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.softmax(scores, 2)?;
    tape.batch_matmul(weights, v)
}

fn check_dims(tape: &Tape, q: Var, k: Var, v: Var, rank: usize) -> Result<()> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let ok = qs.len() == rank
        && ks.len() == rank
        && vs.len() == rank
        && qs[rank - 1] == ks[rank - 1]
        && ks[rank - 2] == vs[rank - 2]
        && qs[..rank - 2] == ks[..rank - 2]
        && ks[..rank - 2] == vs[..rank - 2];
    if !ok {
        return Err(AutodiffError::ShapeMismatch {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    Ok(())
}
