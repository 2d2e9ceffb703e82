use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tubeseg_autodiff::{Tape, Tensor, Var};

use super::matching::Matching;
use super::targets::ClipTargets;
use crate::data::VOID_CLASS;
use crate::error::{Error, Result};

pub const INSTANCE_TEMPERATURE: f64 = 0.3;
pub const INSTANCE_MAX_PIXELS: usize = 1024;
const NORM_EPS: f64 = 1e-12;

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean of `−x[indices]`, or 0 when there are no indices.
fn mean_negative_at(tape: &mut Tape, x: Var, indices: Vec<usize>) -> Result<Var> {
    if indices.is_empty() {
        return Ok(zero(tape));
    }
    let picked = tape.select(x, indices)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Per-pixel cross entropy of the slot softmax against the slot matched to
/// the pixel's ground-truth tube, averaged over labeled pixels.
pub fn tube_id_cross_entropy(
    tape: &mut Tape,
    tube_logits: Var,
    targets: &ClipTargets,
    matching: &Matching,
) -> Result<Var> {
    let pixels = targets.pixel_count();
    if tape.shape(tube_logits)[1] != pixels {
        return Err(Error::Contract(
            "tube logits and targets differ in pixel count".into(),
        ));
    }
    let slot_of: Vec<Option<usize>> = (0..targets.tubes.len())
        .map(|g| matching.slot_of(g))
        .collect();
    let mut indices = Vec::new();
    for (p, g) in targets.labeled_pixels() {
        let s = slot_of[g]
            .ok_or_else(|| Error::Contract(format!("ground-truth tube {g} is unmatched")))?;
        indices.push(s * pixels + p);
    }
    if indices.is_empty() {
        return Ok(zero(tape));
    }
    let log_m = tape.log_softmax(tube_logits, 0)?;
    mean_negative_at(tape, log_m, indices)
}

/// Mean per-pixel softmax cross entropy of `[THW×D]` logits against the
/// pixel classes; void pixels are skipped.
pub fn video_semantic_loss(
    tape: &mut Tape,
    semantic_logits: Var,
    pixel_class: &[u16],
) -> Result<Var> {
    let d = tape.shape(semantic_logits)[1];
    if tape.shape(semantic_logits)[0] != pixel_class.len() {
        return Err(Error::Contract(
            "semantic logits and targets differ in pixel count".into(),
        ));
    }
    let mut indices = Vec::new();
    for (p, &c) in pixel_class.iter().enumerate() {
        if c == VOID_CLASS {
            continue;
        }
        if c as usize >= d {
            return Err(Error::Contract(format!(
                "class {c} outside {d} semantic logits"
            )));
        }
        indices.push(p * d + c as usize);
    }
    if indices.is_empty() {
        return Ok(zero(tape));
    }
    let log_p = tape.log_softmax(semantic_logits, 1)?;
    mean_negative_at(tape, log_p, indices)
}

/// Rows of `[P×C]` scaled to unit L2 norm.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x);
    let norms = tape.sum_axis(sq, 1)?;
    let norms = tape.add_scalar(norms, NORM_EPS);
    let inv = tape.powf(norms, -0.5);
    Ok(tape.mul_along(x, inv, 0)?)
}

/// Labeled pixels used by the instance loss: all of them up to `cap`,
/// otherwise a seeded sample of `cap`, in ascending order.
pub fn sample_pixels(targets: &ClipTargets, cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let labeled: Vec<(usize, usize)> = targets.labeled_pixels().collect();
    if labeled.len() <= cap {
        return labeled;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, labeled.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| labeled[i]).collect()
}

/// InfoNCE of sampled pixel embeddings against tube-mean embeddings:
/// `−log softmax_k(f_p·ḡ_k/τ)[tube(p)]`, with `f` the L2-normalized
/// pixel features and `ḡ_k` the mean of `f` over tube `k`. Zero with fewer
/// than two tubes.
pub fn instance_discrimination_loss(
    tape: &mut Tape,
    features: Var,
    targets: &ClipTargets,
    temperature: f64,
    seed: u64,
) -> Result<Var> {
    let k = targets.tubes.len();
    let pixels = targets.pixel_count();
    if k < 2 {
        return Ok(zero(tape));
    }
    if tape.shape(features)[0] != pixels {
        return Err(Error::Contract(
            "features and targets differ in pixel count".into(),
        ));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let f = l2_normalize_rows(tape, features)?;
    let mut avg = vec![0.0; k * pixels];
    for (p, g) in targets.labeled_pixels() {
        avg[g * pixels + p] = 1.0 / targets.tubes[g].area as f64;
    }
    let avg = tape.constant(Tensor::new(vec![k, pixels], avg)?);
    let means = tape.matmul(avg, f)?;
    let sampled = sample_pixels(targets, INSTANCE_MAX_PIXELS, seed);
    let c = tape.shape(features)[1];
    let rows: Vec<usize> = sampled
        .iter()
        .flat_map(|&(p, _)| p * c..(p + 1) * c)
        .collect();
    let fp = tape.gather(f, rows, vec![sampled.len(), c])?;
    let means_t = tape.transpose(means)?;
    let logits = tape.matmul(fp, means_t)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    let log_p = tape.log_softmax(logits, 1)?;
    let idx = sampled
        .iter()
        .enumerate()
        .map(|(i, &(_, g))| i * k + g)
        .collect();
    mean_negative_at(tape, log_p, idx)
}
