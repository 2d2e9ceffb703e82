//! Clip-level tube assignment and whole-video stitching.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::data::{
    ClassId, ClassTable, LabeledClip, Tube, TubeAnnotation, TubeId, VideoClip, VOID_TUBE,
};
use crate::error::{io_error, Error, Result};
use crate::model::{SlotLayout, TubePrediction};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.4;
pub const STITCH_IOU: f64 = 0.5;

/// One slot's mask proposal in per-mask mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub slot: usize,
    pub class_id: ClassId,
    pub score: f64,
    /// The slot's soft tube `m̂` over `T×H×W`.
    pub soft: Vec<f64>,
    /// `m̂ ≥ mask_threshold`.
    pub mask: Vec<bool>,
}

/// Decoded tubes of one clip. Tube ids are `slot + 1`; the tube table's
/// track ids equal the tube ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    /// Index of the clip's first frame within the video.
    pub start_frame: usize,
    pub ann: TubeAnnotation,
    pub depth: Option<Vec<f64>>,
    pub proposals: Vec<Proposal>,
}

impl ClipResult {
    pub fn frames(&self) -> usize {
        self.ann.frames
    }

    pub fn class_map(&self) -> Vec<ClassId> {
        self.ann.class_map()
    }

    /// Ground truth passed through as a prediction.
    pub fn from_ground_truth(start_frame: usize, clip: &LabeledClip) -> Self {
        Self {
            start_frame,
            ann: clip.ann.clone(),
            depth: clip.clip.depth().map(<[f64]>::to_vec),
            proposals: Vec::new(),
        }
    }

    /// The result as a TSEG-encodable clip with blank RGB.
    pub fn to_labeled_clip(&self, d_max: f64) -> Result<LabeledClip> {
        let a = &self.ann;
        let clip = VideoClip::new(
            a.frames,
            a.height,
            a.width,
            vec![0; a.pixel_count() * 3],
            self.depth.clone(),
            d_max,
        )?;
        Ok(LabeledClip {
            clip,
            ann: a.clone(),
        })
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_prediction(pred: &TubePrediction, layout: &SlotLayout) -> Result<()> {
    if pred.memory != layout.memory() {
        return Err(Error::Contract(format!(
            "prediction has {} slots, layout {}",
            pred.memory,
            layout.memory()
        )));
    }
    Ok(())
}

/// Class a surviving slot decodes to, or `None` when it is voided.
fn slot_class(
    pred: &TubePrediction,
    layout: &SlotLayout,
    slot: usize,
    threshold: f64,
) -> Option<ClassId> {
    let row = pred.class_row(slot);
    let real = &row[..pred.classes];
    let best = argmax(real);
    if argmax(row) == pred.classes || real[best] < threshold {
        return None;
    }
    Some(layout.stuff_class_of(slot).unwrap_or(best as ClassId))
}

fn slot_tube(table: &ClassTable, slot: usize, class_id: ClassId) -> Tube {
    let id = (slot + 1) as TubeId;
    Tube {
        tube_id: id,
        class_id,
        is_thing: table.is_thing(class_id).unwrap_or(true),
        track_id: id as u32,
    }
}

fn finish(
    pred: &TubePrediction,
    start_frame: usize,
    label_map: Vec<TubeId>,
    tubes: Vec<Tube>,
    proposals: Vec<Proposal>,
) -> ClipResult {
    let mut ann = TubeAnnotation {
        frames: pred.frames,
        height: pred.height,
        width: pred.width,
        label_map,
        tubes,
    };
    ann.tubes = ann.present_tubes();
    ClipResult {
        start_frame,
        ann,
        depth: pred.depth.clone(),
        proposals,
    }
}

/// Double argmax: each slot takes its most likely class, slots that predict
/// ∅ or whose best real-class probability is below `threshold` are removed,
/// and each pixel goes to the remaining slot with the largest `m̂`.
pub fn assign_per_pixel(
    pred: &TubePrediction,
    layout: &SlotLayout,
    table: &ClassTable,
    threshold: f64,
    start_frame: usize,
) -> Result<ClipResult> {
    check_prediction(pred, layout)?;
    let kept: Vec<(usize, ClassId)> = (0..pred.memory)
        .filter_map(|s| slot_class(pred, layout, s, threshold).map(|c| (s, c)))
        .collect();
    // Every slot decoding to a stuff class paints that class's single stuff
    // tube, owned by the bound stuff slot when it survives.
    let mut owner: Vec<usize> = kept.iter().map(|&(s, _)| s).collect();
    for (i, &(_, c)) in kept.iter().enumerate() {
        if table.is_thing(c).unwrap_or(true) {
            continue;
        }
        let same = || kept.iter().filter(|&&(_, k)| k == c).map(|&(s, _)| s);
        owner[i] = same()
            .find(|&s| layout.stuff_class_of(s) == Some(c))
            .unwrap_or_else(|| same().min().unwrap_or(kept[i].0));
    }
    let label_map = (0..pred.pixels())
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, &(s, _)) in kept.iter().enumerate() {
                let v = pred.tube_prob(s, p);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((owner[i], v));
                }
            }
            best.map_or(VOID_TUBE, |(s, _)| (s + 1) as TubeId)
        })
        .collect();
    let tubes = kept
        .iter()
        .zip(&owner)
        .filter(|((s, _), o)| s == *o)
        .map(|(&(s, c), _)| slot_tube(table, s, c))
        .collect();
    Ok(finish(pred, start_frame, label_map, tubes, Vec::new()))
}

/// Per-slot mask proposals from the thing slots: mask `m̂ ≥ mask_threshold`,
/// score = best real-class probability × mean `m̂` inside the mask. Empty
/// masks are dropped. The id map paints proposals so that a pixel belongs to
/// the highest-scoring proposal covering it.
pub fn assign_per_mask(
    pred: &TubePrediction,
    layout: &SlotLayout,
    table: &ClassTable,
    mask_threshold: f64,
    start_frame: usize,
) -> Result<ClipResult> {
    check_prediction(pred, layout)?;
    let pixels = pred.pixels();
    let mut proposals = Vec::new();
    for s in layout.thing_slots() {
        let soft: Vec<f64> = (0..pixels).map(|p| pred.tube_prob(s, p)).collect();
        let mask: Vec<bool> = soft.iter().map(|&v| v >= mask_threshold).collect();
        let (sum, count) = soft
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
        if count == 0 {
            continue;
        }
        let real = &pred.class_row(s)[..pred.classes];
        let class = argmax(real);
        proposals.push(Proposal {
            slot: s,
            class_id: class as ClassId,
            score: real[class] * sum / count as f64,
            soft,
            mask,
        });
    }
    let mut order: Vec<&Proposal> = proposals.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.slot.cmp(&b.slot)));
    let mut label_map = vec![VOID_TUBE; pixels];
    for prop in order.iter().rev() {
        for (p, _) in prop.mask.iter().enumerate().filter(|(_, &m)| m) {
            label_map[p] = (prop.slot + 1) as TubeId;
        }
    }
    let tubes = proposals
        .iter()
        .map(|p| slot_tube(table, p.slot, p.class_id))
        .collect();
    Ok(finish(pred, start_frame, label_map, tubes, proposals))
}

/// Whole-video segmentation. Tube ids are track ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub ann: TubeAnnotation,
    pub depth: Option<Vec<f64>>,
}

impl VideoResult {
    pub fn frames(&self) -> usize {
        self.ann.frames
    }

    pub fn class_map(&self) -> Vec<ClassId> {
        self.ann.class_map()
    }

    /// Per-pixel track ids, 0 for void.
    pub fn track_map(&self) -> Vec<u32> {
        let tracks: BTreeMap<TubeId, u32> = self
            .ann
            .tubes
            .iter()
            .map(|t| (t.tube_id, t.track_id))
            .collect();
        self.ann
            .label_map
            .iter()
            .map(|id| tracks.get(id).copied().unwrap_or(0))
            .collect()
    }

    pub fn to_labeled_clip(&self, d_max: f64) -> Result<LabeledClip> {
        let a = &self.ann;
        let clip = VideoClip::new(
            a.frames,
            a.height,
            a.width,
            vec![0; a.pixel_count() * 3],
            self.depth.clone(),
            d_max,
        )?;
        Ok(LabeledClip {
            clip,
            ann: a.clone(),
        })
    }

    pub fn from_labeled_clip(clip: &LabeledClip) -> Self {
        Self {
            ann: clip.ann.clone(),
            depth: clip.clip.depth().map(<[f64]>::to_vec),
        }
    }
}

struct TrackAllocator {
    next: u32,
}

impl TrackAllocator {
    fn fresh(&mut self) -> Result<u32> {
        self.next += 1;
        if self.next >= TubeId::MAX as u32 {
            return Err(Error::Stitch("too many tracks for one video".into()));
        }
        Ok(self.next)
    }
}

fn check_alignment(results: &[ClipResult]) -> Result<()> {
    let first = results
        .first()
        .ok_or_else(|| Error::Stitch("no clip results to stitch".into()))?;
    if first.start_frame != 0 {
        return Err(Error::Stitch(format!(
            "first clip starts at frame {}, not 0",
            first.start_frame
        )));
    }
    let extent = (first.ann.frames, first.ann.height, first.ann.width);
    for (i, pair) in results.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if (b.ann.frames, b.ann.height, b.ann.width) != extent {
            return Err(Error::Stitch(format!(
                "clip {} has a different extent than clip 0",
                i + 1
            )));
        }
        if b.start_frame != a.start_frame + 1 {
            return Err(Error::Stitch(format!(
                "clip {} starts at frame {} but must overlap clip {} by {} frames",
                i + 1,
                b.start_frame,
                i,
                extent.0 - 1
            )));
        }
        if a.depth.is_some() != b.depth.is_some() {
            return Err(Error::Stitch(format!(
                "clip {} disagrees on depth presence",
                i + 1
            )));
        }
    }
    Ok(())
}

/// IoU-matches each clip's tubes to the tracks built so far on the `T − 1`
/// overlapping frames. Greedy by descending IoU (ties: lower track id, then
/// lower tube id), same class only, IoU ≥ 0.5; unmatched tubes open new
/// tracks in tube-id order.
pub fn stitch_clips(results: &[ClipResult]) -> Result<VideoResult> {
    check_alignment(results)?;
    let first = &results[0];
    let (t, h, w) = (first.ann.frames, first.ann.height, first.ann.width);
    let hw = h * w;
    let total = results.last().map_or(0, |r| r.start_frame + t);
    let mut tracks = vec![0u32; total * hw];
    let mut depth = first.depth.as_ref().map(|_| vec![0.0; total * hw]);
    let mut track_info: BTreeMap<u32, Tube> = BTreeMap::new();
    let mut alloc = TrackAllocator { next: 0 };

    for (i, r) in results.iter().enumerate() {
        let overlap = if i == 0 { 0 } else { t - 1 };
        let present = r.ann.present_tubes();
        let mut resolved: BTreeMap<TubeId, u32> = BTreeMap::new();

        if overlap > 0 {
            let base = r.start_frame * hw;
            let mut inter: BTreeMap<(u32, TubeId), usize> = BTreeMap::new();
            let mut prev_area: BTreeMap<u32, usize> = BTreeMap::new();
            let mut new_area: BTreeMap<TubeId, usize> = BTreeMap::new();
            for p in 0..overlap * hw {
                let a = tracks[base + p];
                let b = r.ann.label_map[p];
                if a != 0 {
                    *prev_area.entry(a).or_default() += 1;
                }
                if b != VOID_TUBE {
                    *new_area.entry(b).or_default() += 1;
                }
                if a != 0 && b != VOID_TUBE {
                    *inter.entry((a, b)).or_default() += 1;
                }
            }
            let mut candidates: Vec<(f64, u32, TubeId)> = inter
                .iter()
                .filter(|(&(a, b), _)| {
                    r.ann
                        .tube(b)
                        .is_some_and(|tb| tb.class_id == track_info[&a].class_id)
                })
                .map(|(&(a, b), &n)| {
                    let union = prev_area[&a] + new_area[&b] - n;
                    (n as f64 / union as f64, a, b)
                })
                .filter(|&(iou, _, _)| iou >= STITCH_IOU)
                .collect();
            candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_tracks = BTreeSet::new();
            for (_, a, b) in candidates {
                if !used_tracks.contains(&a) && !resolved.contains_key(&b) {
                    used_tracks.insert(a);
                    resolved.insert(b, a);
                }
            }
        }
        for tube in &present {
            if let Entry::Vacant(slot) = resolved.entry(tube.tube_id) {
                let id = alloc.fresh()?;
                track_info.insert(
                    id,
                    Tube {
                        tube_id: id as TubeId,
                        track_id: id,
                        ..*tube
                    },
                );
                slot.insert(id);
            }
        }

        let offset = r.start_frame * hw;
        for p in overlap * hw..t * hw {
            let id = r.ann.label_map[p];
            tracks[offset + p] = if id == VOID_TUBE { 0 } else { resolved[&id] };
            if let (Some(dst), Some(src)) = (depth.as_mut(), r.depth.as_ref()) {
                dst[offset + p] = src[p];
            }
        }
    }

    let label_map: Vec<TubeId> = tracks.iter().map(|&k| k as TubeId).collect();
    let mut ann = TubeAnnotation {
        frames: total,
        height: h,
        width: w,
        label_map,
        tubes: track_info.into_values().collect(),
    };
    ann.tubes = ann.present_tubes();
    Ok(VideoResult { ann, depth })
}

/// Whole-video ground truth from overlapping clips, joining tubes by track id.
/// Frames already covered by an earlier clip keep the earlier labels.
pub fn assemble_ground_truth(clips: &[LabeledClip], starts: &[usize]) -> Result<LabeledClip> {
    if clips.is_empty() || clips.len() != starts.len() {
        return Err(Error::Contract("need one start frame per clip".into()));
    }
    let (h, w, d_max) = (
        clips[0].clip.height(),
        clips[0].clip.width(),
        clips[0].clip.d_max(),
    );
    let hw = h * w;
    let total = clips
        .iter()
        .zip(starts)
        .map(|(c, &s)| s + c.clip.frames())
        .max()
        .unwrap_or(0);
    let has_depth = clips.iter().all(|c| c.clip.depth().is_some());
    let mut rgb = vec![0u8; total * hw * 3];
    let mut depth = vec![d_max; total * hw];
    let mut tracks = vec![0u32; total * hw];
    let mut covered = vec![false; total];
    let mut info: BTreeMap<u32, Tube> = BTreeMap::new();
    for (c, &s) in clips.iter().zip(starts) {
        if (c.clip.height(), c.clip.width()) != (h, w) {
            return Err(Error::Contract("clips differ in frame size".into()));
        }
        let by_id: BTreeMap<TubeId, Tube> = c.ann.tubes.iter().map(|t| (t.tube_id, *t)).collect();
        for f in 0..c.clip.frames() {
            if covered[s + f] {
                continue;
            }
            covered[s + f] = true;
            for q in 0..hw {
                let (src, dst) = (f * hw + q, (s + f) * hw + q);
                rgb[3 * dst..3 * dst + 3].copy_from_slice(&c.clip.rgb()[3 * src..3 * src + 3]);
                if let Some(d) = c.clip.depth() {
                    depth[dst] = d[src];
                }
                let id = c.ann.label_map[src];
                if id != VOID_TUBE {
                    let tube = by_id.get(&id).ok_or_else(|| {
                        Error::Contract(format!("tube {id} missing from its table"))
                    })?;
                    if let Some(prev) = info.get(&tube.track_id) {
                        if prev.class_id != tube.class_id {
                            return Err(Error::Contract(format!(
                                "track {} changes class",
                                tube.track_id
                            )));
                        }
                    }
                    info.insert(tube.track_id, *tube);
                    tracks[dst] = tube.track_id;
                }
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::Contract("clips leave frames uncovered".into()));
    }
    if info.len() >= TubeId::MAX as usize {
        return Err(Error::Contract("too many tracks for one video".into()));
    }
    let compact: BTreeMap<u32, TubeId> = info
        .keys()
        .enumerate()
        .map(|(i, &k)| (k, (i + 1) as TubeId))
        .collect();
    let tubes = info
        .values()
        .map(|t| Tube {
            tube_id: compact[&t.track_id],
            ..*t
        })
        .collect();
    let ann = TubeAnnotation {
        frames: total,
        height: h,
        width: w,
        label_map: tracks
            .iter()
            .map(|k| if *k == 0 { VOID_TUBE } else { compact[k] })
            .collect(),
        tubes,
    };
    let clip = VideoClip::new(total, h, w, rgb, has_depth.then_some(depth), d_max)?;
    Ok(LabeledClip { clip, ann })
}

const PROPOSAL_MAGIC: &[u8; 4] = b"TPRP";
const PROPOSAL_VERSION: u32 = 1;

/// Binary proposal dump: magic, version, pixel count, proposal count, then
/// per proposal slot (u32), class (u16), score (f64) and one 0/1 byte per pixel.
pub fn encode_proposals(proposals: &[Proposal], pixels: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PROPOSAL_MAGIC);
    out.extend_from_slice(&PROPOSAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(pixels as u32).to_le_bytes());
    out.extend_from_slice(&(proposals.len() as u32).to_le_bytes());
    for p in proposals {
        out.extend_from_slice(&(p.slot as u32).to_le_bytes());
        out.extend_from_slice(&p.class_id.to_le_bytes());
        out.extend_from_slice(&p.score.to_le_bytes());
        out.extend(p.mask.iter().map(|&m| m as u8));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("proposal dump is truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// A decoded proposal record: `(slot, class, score, mask)`.
pub type ProposalRecord = (usize, ClassId, f64, Vec<bool>);

pub fn decode_proposals(bytes: &[u8]) -> Result<Vec<ProposalRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != PROPOSAL_MAGIC {
        return Err(Error::Format("proposal dump has a bad magic".into()));
    }
    if r.u32()? != PROPOSAL_VERSION {
        return Err(Error::Format("unsupported proposal dump version".into()));
    }
    let pixels = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let slot = r.u32()? as usize;
        let class = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        let score = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let mask = r.take(pixels)?.iter().map(|&b| b != 0).collect();
        out.push((slot, class, score, mask));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("proposal dump has trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_proposals(path: &Path, proposals: &[Proposal], pixels: usize) -> Result<()> {
    std::fs::write(path, encode_proposals(proposals, pixels)).map_err(io_error(path))
}
