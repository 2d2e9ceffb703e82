use tubeseg_autodiff::{Tape, Var};

use super::dice::{dice_coefficient, dice_var};
use super::matching::Matching;
use super::targets::ClipTargets;
use crate::error::{Error, Result};

/// Weight of the ∅ term relative to the matched term.
pub const NEG_WEIGHT: f64 = 0.3;

/// Matching plus the stop-gradient factors of each matched pair, computed
/// once from forward values so the loss stays a fixed function of the
/// parameters (needed for finite-difference checks).
#[derive(Debug, Clone, PartialEq)]
pub struct PqFactors {
    pub matching: Matching,
    /// Dice of each pair, in pair order.
    pub dice: Vec<f64>,
    /// `p̂_j(c_i)` of each pair, in pair order.
    pub class_prob: Vec<f64>,
}

impl PqFactors {
    pub fn new(
        matching: Matching,
        class_probs: &[f64],
        tube_probs: &[f64],
        targets: &ClipTargets,
        classes: usize,
    ) -> Result<Self> {
        let pixels = targets.pixel_count();
        let mut dice = Vec::with_capacity(matching.pairs.len());
        let mut class_prob = Vec::with_capacity(matching.pairs.len());
        for &(g, s) in &matching.pairs {
            let gt = &targets.tubes[g];
            dice.push(dice_coefficient(
                &gt.mask,
                &tube_probs[s * pixels..(s + 1) * pixels],
            )?);
            class_prob.push(class_probs[s * (classes + 1) + gt.class_id as usize]);
        }
        Ok(Self {
            matching,
            dice,
            class_prob,
        })
    }
}

/// Matched and unmatched parts of the PQ-style loss.
#[derive(Debug, Clone, Copy)]
pub struct PqTerms {
    pub pos: Var,
    pub neg: Var,
}

/// PQ-style loss on class logits `[N×(D+1)]` and soft tubes `[N×THW]`.
///
/// Matched pairs contribute `−sg(Dice)·log p̂(c) + sg(p̂(c))·(1 − Dice)`,
/// averaged over pairs; this has the gradient of
/// `−[sg(Dice)·log p̂(c) + sg(p̂(c))·Dice]` and vanishes at a perfect match.
/// Unmatched slots contribute `−log p̂(∅)`, averaged.
pub fn pq_style_loss(
    tape: &mut Tape,
    class_logits: Var,
    tube_probs: Var,
    targets: &ClipTargets,
    factors: &PqFactors,
) -> Result<PqTerms> {
    let k = tape.shape(class_logits)[1];
    let pixels = tape.shape(tube_probs)[1];
    if pixels != targets.pixel_count() {
        return Err(Error::Contract(format!(
            "tube predictions cover {pixels} pixels, targets {}",
            targets.pixel_count()
        )));
    }
    let log_p = tape.log_softmax(class_logits, 1)?;
    let pairs = &factors.matching.pairs;
    let pos = if pairs.is_empty() {
        tape.constant(tubeseg_autodiff::Tensor::scalar(0.0))
    } else {
        let mut terms = Vec::with_capacity(pairs.len());
        for (idx, &(g, s)) in pairs.iter().enumerate() {
            let gt = &targets.tubes[g];
            let lp = tape.select(log_p, vec![s * k + gt.class_id as usize])?;
            let lp = tape.reshape(lp, vec![])?;
            let class_term = tape.scale(lp, -factors.dice[idx]);
            let row = tape.slice(tube_probs, 0, s, 1)?;
            let dice = dice_var(tape, row, &gt.mask)?;
            let mask_term = tape.affine(dice, -factors.class_prob[idx], factors.class_prob[idx]);
            let term = tape.add(class_term, mask_term)?;
            terms.push(tape.reshape(term, vec![1])?);
        }
        let all = tape.concat(&terms, 0)?;
        tape.mean(all)
    };
    let unmatched = &factors.matching.unmatched_slots;
    let neg = if unmatched.is_empty() {
        tape.constant(tubeseg_autodiff::Tensor::scalar(0.0))
    } else {
        let idx = unmatched.iter().map(|&s| s * k + k - 1).collect();
        let lp = tape.select(log_p, idx)?;
        let m = tape.mean(lp);
        tape.scale(m, -1.0)
    };
    Ok(PqTerms { pos, neg })
}
