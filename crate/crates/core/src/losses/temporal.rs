use tubeseg_autodiff::{Tape, Var};

use crate::error::{Error, Result};
use crate::model::ClipForward;

/// Mean absolute difference between two `[N×(O·H·W)]` tube-logit blocks.
pub fn temporal_consistency_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Contract(format!(
            "overlap logits differ in shape: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Tube logits of frames `start..start + count` of a clip forward.
pub fn frame_logits(tape: &mut Tape, f: &ClipForward, start: usize, count: usize) -> Result<Var> {
    let hw = f.height * f.width;
    Ok(tape.slice(f.tube_logits, 1, start * hw, count * hw)?)
}

/// Temporal loss between the last `overlap` frames of clip `a` and the first
/// `overlap` frames of clip `b`.
pub fn clip_pair_temporal_loss(
    tape: &mut Tape,
    a: &ClipForward,
    b: &ClipForward,
    overlap: usize,
) -> Result<Var> {
    if overlap == 0 {
        return Err(Error::Contract(
            "temporal loss needs at least one overlapping frame".into(),
        ));
    }
    if overlap > a.frames || overlap > b.frames || (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Contract(format!(
            "overlap of {overlap} frames does not fit clips of {} and {} frames",
            a.frames, b.frames
        )));
    }
    let la = frame_logits(tape, a, a.frames - overlap, overlap)?;
    let lb = frame_logits(tape, b, 0, overlap)?;
    temporal_consistency_loss(tape, la, lb)
}
