use tubeseg_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const SILOG_LAMBDA: f64 = 0.85;

/// `SILog + RSE` over the valid pixels, with `e = log d̂ − log d`:
/// `SILog = mean(e²) − λ·mean(e)²` and `RSE = mean(((d̂ − d)/d)²)`.
/// Zero when no pixel is valid.
pub fn depth_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &[f64],
    valid: &[bool],
    lambda: f64,
) -> Result<Var> {
    let n = tape.value(pred).len();
    if gt.len() != n || valid.len() != n {
        return Err(Error::Contract(format!(
            "depth prediction has {n} values, target {} and mask {}",
            gt.len(),
            valid.len()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if let Some(&bad) = idx.iter().find(|&&i| gt[i].is_nan() || gt[i] <= 0.0) {
        return Err(Error::Contract(format!(
            "ground-truth depth {} is not positive",
            gt[bad]
        )));
    }
    let m = idx.len();
    let flat = tape.reshape(pred, vec![n])?;
    let d_hat = tape.select(flat, idx.clone())?;
    let log_gt = tape.constant(Tensor::new(
        vec![m],
        idx.iter().map(|&i| gt[i].ln()).collect(),
    )?);
    let gt_v = tape.constant(Tensor::new(vec![m], idx.iter().map(|&i| gt[i]).collect())?);
    let inv_gt = tape.constant(Tensor::new(
        vec![m],
        idx.iter().map(|&i| 1.0 / gt[i]).collect(),
    )?);

    let log_hat = tape.log(d_hat);
    let e = tape.sub(log_hat, log_gt)?;
    let e2 = tape.square(e);
    let mean_e2 = tape.mean(e2);
    let mean_e = tape.mean(e);
    let mean_e_sq = tape.square(mean_e);
    let penalty = tape.scale(mean_e_sq, lambda);
    let silog = tape.sub(mean_e2, penalty)?;

    let diff = tape.sub(d_hat, gt_v)?;
    let rel = tape.mul(diff, inv_gt)?;
    let rel2 = tape.square(rel);
    let rse = tape.mean(rel2);
    Ok(tape.add(silog, rse)?)
}
