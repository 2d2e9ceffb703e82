use tubeseg_autodiff::{Tape, Var};

use crate::error::{Error, Result};

/// Smoothing term in every Dice denominator.
pub const DICE_EPS: f64 = 1e-8;

/// Soft Dice `2·Σ(m·m̂) / (Σm + Σm̂ + ε)` over a whole tube volume.
pub fn dice_coefficient(gt: &[f64], pred: &[f64]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::Contract(format!(
            "dice inputs differ in size: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let inter: f64 = gt.iter().zip(pred).map(|(a, b)| a * b).sum();
    let sg: f64 = gt.iter().sum();
    let sp: f64 = pred.iter().sum();
    Ok(2.0 * inter / (sg + sp + DICE_EPS))
}

/// Differentiable Dice of a soft tube `pred` (any shape) against a constant
/// mask with the same number of elements.
pub fn dice_var(tape: &mut Tape, pred: Var, gt: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if tape.value(pred).len() != gt.len() {
        return Err(Error::Contract(format!(
            "dice mask has {} elements, prediction {:?}",
            gt.len(),
            shape
        )));
    }
    let mask = tape.constant(tubeseg_autodiff::Tensor::new(shape, gt.to_vec())?);
    let prod = tape.mul(pred, mask)?;
    let inter = tape.sum(prod);
    let inter2 = tape.scale(inter, 2.0);
    let sp = tape.sum(pred);
    let sg: f64 = gt.iter().sum();
    let denom = tape.add_scalar(sp, sg + DICE_EPS);
    Ok(tape.div(inter2, denom)?)
}

/// `p̂(c)·Dice`, the per-pair matching score.
pub fn vpq_similarity(class_prob: f64, dice: f64) -> f64 {
    class_prob * dice
}
