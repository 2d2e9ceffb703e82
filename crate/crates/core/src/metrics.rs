//! SQ, AQ, STQ, VPQ and the depth-inlier DQ/DSTQ.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{ClassId, LabeledClip, TrackId, TubeAnnotation, TubeId, VOID_CLASS, VOID_TUBE};
use crate::error::{Error, Result};
use crate::inference::VideoResult;

pub const DEFAULT_WINDOWS: [usize; 4] = [1, 2, 3, 4];
pub const DEFAULT_DQ_THRESHOLD: f64 = 1.25;
const VPQ_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StqReport {
    pub sq: f64,
    pub aq: f64,
    pub stq: f64,
}

pub fn stq_from_components(sq: f64, aq: f64) -> f64 {
    (sq * aq).sqrt()
}

pub fn dstq_from_components(sq: f64, aq: f64, dq: f64) -> f64 {
    (sq * aq * dq).cbrt()
}

fn check_extent(pred: &TubeAnnotation, gt: &TubeAnnotation) -> Result<()> {
    if (pred.frames, pred.height, pred.width) != (gt.frames, gt.height, gt.width) {
        return Err(Error::Metric(format!(
            "prediction covers {}×{}×{} but ground truth {}×{}×{}",
            pred.frames, pred.height, pred.width, gt.frames, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Per-pixel identity: class, plus the track for things.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Segment {
    class_id: ClassId,
    track: Option<TrackId>,
}

fn segment_map(ann: &TubeAnnotation) -> Vec<Option<Segment>> {
    let lookup: BTreeMap<TubeId, Segment> = ann
        .tubes
        .iter()
        .map(|t| {
            let seg = Segment {
                class_id: t.class_id,
                track: t.is_thing.then_some(t.track_id),
            };
            (t.tube_id, seg)
        })
        .collect();
    ann.label_map
        .iter()
        .map(|&id| {
            if id == VOID_TUBE {
                None
            } else {
                lookup.get(&id).copied()
            }
        })
        .collect()
}

/// Mean per-class IoU of the semantic maps over pixels labeled in the ground
/// truth. Classes absent from both are skipped.
pub fn compute_sq(pred: &TubeAnnotation, gt: &TubeAnnotation) -> Result<f64> {
    check_extent(pred, gt)?;
    let (pc, gc) = (pred.class_map(), gt.class_map());
    let mut inter: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut union: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (&p, &g) in pc.iter().zip(&gc) {
        if g == VOID_CLASS {
            continue;
        }
        *union.entry(g).or_default() += 1;
        if p == g {
            *inter.entry(g).or_default() += 1;
        } else if p != VOID_CLASS {
            *union.entry(p).or_default() += 1;
        }
    }
    if union.is_empty() {
        return Err(Error::Metric("ground truth has no labeled pixels".into()));
    }
    let total: f64 = union
        .iter()
        .map(|(c, &u)| inter.get(c).copied().unwrap_or(0) as f64 / u as f64)
        .sum();
    Ok(total / union.len() as f64)
}

/// Mean over ground-truth thing tracks `g` of
/// `(1/|g|)·Σ_p |p∩g|·IoU(p, g)` over predicted thing tracks `p`, with
/// predictions restricted to pixels labeled in the ground truth.
pub fn compute_aq(pred: &TubeAnnotation, gt: &TubeAnnotation) -> Result<f64> {
    check_extent(pred, gt)?;
    let (ps, gs) = (segment_map(pred), segment_map(gt));
    let mut gt_area: BTreeMap<TrackId, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<TrackId, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(TrackId, TrackId), usize> = BTreeMap::new();
    for (p, g) in ps.iter().zip(&gs) {
        let Some(g) = g else { continue };
        let gt_track = g.track;
        let pred_track = p.and_then(|s| s.track);
        if let Some(gk) = gt_track {
            *gt_area.entry(gk).or_default() += 1;
        }
        if let Some(pk) = pred_track {
            *pred_area.entry(pk).or_default() += 1;
        }
        if let (Some(gk), Some(pk)) = (gt_track, pred_track) {
            *inter.entry((gk, pk)).or_default() += 1;
        }
    }
    if gt_area.is_empty() {
        return Err(Error::Metric(
            "AQ is undefined without ground-truth thing tracks".into(),
        ));
    }
    let mut per_track: BTreeMap<TrackId, f64> = gt_area.keys().map(|&k| (k, 0.0)).collect();
    for (&(gk, pk), &n) in &inter {
        let union = gt_area[&gk] + pred_area[&pk] - n;
        *per_track.get_mut(&gk).expect("gt track") += n as f64 * n as f64 / union as f64;
    }
    let total: f64 = per_track.iter().map(|(k, v)| v / gt_area[k] as f64).sum();
    Ok(total / gt_area.len() as f64)
}

pub fn compute_stq(pred: &TubeAnnotation, gt: &TubeAnnotation) -> Result<StqReport> {
    let sq = compute_sq(pred, gt)?;
    let aq = compute_aq(pred, gt)?;
    Ok(StqReport {
        sq,
        aq,
        stq: stq_from_components(sq, aq),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpqReport {
    /// `(k, VPQ_k)` per window size.
    pub per_window: Vec<(usize, f64)>,
    pub vpq: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct PqAccumulator {
    iou: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Video panoptic quality for window size `k`: per-class PQ over tube
/// segments of every `k`-frame span, averaged over classes that occur.
/// Predicted pixels on ground-truth void are ignored.
pub fn vpq_for_window(pred: &TubeAnnotation, gt: &TubeAnnotation, k: usize) -> Result<f64> {
    check_extent(pred, gt)?;
    if k == 0 || k > gt.frames {
        return Err(Error::Parameter(format!(
            "window {k} outside 1..={}",
            gt.frames
        )));
    }
    let hw = gt.height * gt.width;
    let (ps, gs) = (segment_map(pred), segment_map(gt));
    let mut acc: BTreeMap<ClassId, PqAccumulator> = BTreeMap::new();
    for start in 0..=gt.frames - k {
        let range = start * hw..(start + k) * hw;
        let mut gt_area: BTreeMap<Segment, usize> = BTreeMap::new();
        let mut pred_area: BTreeMap<Segment, usize> = BTreeMap::new();
        let mut inter: BTreeMap<(Segment, Segment), usize> = BTreeMap::new();
        for (p, g) in ps[range.clone()].iter().zip(&gs[range]) {
            let Some(g) = g else { continue };
            *gt_area.entry(*g).or_default() += 1;
            if let Some(p) = p {
                *pred_area.entry(*p).or_default() += 1;
                if p.class_id == g.class_id {
                    *inter.entry((*g, *p)).or_default() += 1;
                }
            }
        }
        let mut matched_gt = BTreeSet::new();
        let mut matched_pred = BTreeSet::new();
        for (&(g, p), &n) in &inter {
            let iou = n as f64 / (gt_area[&g] + pred_area[&p] - n) as f64;
            if iou > VPQ_MATCH_IOU {
                let a = acc.entry(g.class_id).or_default();
                a.iou += iou;
                a.tp += 1;
                matched_gt.insert(g);
                matched_pred.insert(p);
            }
        }
        for g in gt_area.keys().filter(|g| !matched_gt.contains(*g)) {
            acc.entry(g.class_id).or_default().fn_ += 1;
        }
        for p in pred_area.keys().filter(|p| !matched_pred.contains(*p)) {
            acc.entry(p.class_id).or_default().fp += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::Metric("no segments to evaluate".into()));
    }
    let total: f64 = acc
        .values()
        .map(|a| a.iou / (a.tp as f64 + 0.5 * a.fp as f64 + 0.5 * a.fn_ as f64))
        .sum();
    Ok(total / acc.len() as f64)
}

pub fn compute_vpq(
    pred: &TubeAnnotation,
    gt: &TubeAnnotation,
    windows: &[usize],
) -> Result<VpqReport> {
    if windows.is_empty() {
        return Err(Error::Parameter("no VPQ window sizes given".into()));
    }
    let per_window = windows
        .iter()
        .map(|&k| Ok((k, vpq_for_window(pred, gt, k)?)))
        .collect::<Result<Vec<_>>>()?;
    let vpq = per_window.iter().map(|(_, v)| v).sum::<f64>() / per_window.len() as f64;
    Ok(VpqReport { per_window, vpq })
}

/// Fraction of valid pixels (positive ground truth) whose ratio
/// `max(d̂/d, d/d̂)` is below `threshold`.
pub fn compute_dq(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "{} predicted depths for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if threshold.is_nan() || threshold <= 1.0 {
        return Err(Error::Parameter(format!(
            "depth inlier threshold must exceed 1, got {threshold}"
        )));
    }
    let mut valid = 0usize;
    let mut inliers = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if !(g > 0.0 && g.is_finite()) {
            continue;
        }
        valid += 1;
        if p > 0.0 && (p / g).max(g / p) < threshold {
            inliers += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Metric("no valid ground-truth depth pixels".into()));
    }
    Ok(inliers as f64 / valid as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sq: f64,
    pub aq: f64,
    pub stq: f64,
    pub vpq: Option<VpqReport>,
    pub dq: Option<f64>,
    pub dstq: Option<f64>,
}

impl MetricReport {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("sq".into(), self.sq),
            ("aq".into(), self.aq),
            ("stq".into(), self.stq),
        ];
        if let Some(v) = &self.vpq {
            for &(k, x) in &v.per_window {
                out.push((format!("vpq_k{k}"), x));
            }
            out.push(("vpq".into(), v.vpq));
        }
        if let (Some(dq), Some(dstq)) = (self.dq, self.dstq) {
            out.push(("dq".into(), dq));
            out.push(("dstq".into(), dstq));
        }
        out
    }

    /// `metric<TAB>value` lines.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }

    /// `metric=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// What to compute besides STQ.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub vpq_windows: Option<Vec<usize>>,
    pub dq_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            vpq_windows: Some(DEFAULT_WINDOWS.to_vec()),
            dq_threshold: None,
        }
    }
}

pub fn evaluate_video(
    pred: &VideoResult,
    gt: &LabeledClip,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let StqReport { sq, aq, stq } = compute_stq(&pred.ann, &gt.ann)?;
    let vpq = match &options.vpq_windows {
        Some(w) => Some(compute_vpq(&pred.ann, &gt.ann, w)?),
        None => None,
    };
    let dq = match options.dq_threshold {
        Some(th) => {
            let gt_depth = gt
                .clip
                .depth()
                .ok_or_else(|| Error::Metric("ground truth carries no depth".into()))?;
            let pred_depth = pred
                .depth
                .as_deref()
                .ok_or_else(|| Error::Metric("prediction carries no depth".into()))?;
            Some(compute_dq(pred_depth, gt_depth, th)?)
        }
        None => None,
    };
    Ok(MetricReport {
        sq,
        aq,
        stq,
        vpq,
        dq,
        dstq: dq.map(|d| dstq_from_components(sq, aq, d)),
    })
}
