//! Clip-level copy-paste: tubes of one clip pasted on top of another.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{validate_annotation, ClassTable, LabeledClip, Tube, TubeId, VOID_TUBE};
use crate::error::{Error, Result};

pub const PASTE_PROBABILITY: f64 = 0.5;
pub const TUBE_SELECT_PROBABILITY: f64 = 0.5;

/// One paste: which source tubes go onto which target.
#[derive(Debug, Clone)]
pub struct PasteSpec<'a> {
    pub source: &'a LabeledClip,
    pub target: &'a LabeledClip,
    pub source_classes: &'a ClassTable,
    pub target_classes: &'a ClassTable,
    /// Source tube ids to paste, ascending.
    pub selected: Vec<TubeId>,
    pub apply: bool,
    pub seed: u64,
}

impl<'a> PasteSpec<'a> {
    /// Draws `apply` with probability 0.5 and then each present source tube
    /// with probability 0.5, forcing one when none is drawn.
    pub fn draw(
        source: &'a LabeledClip,
        target: &'a LabeledClip,
        classes: &'a ClassTable,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let apply = rng.random_bool(PASTE_PROBABILITY);
        let candidates: Vec<TubeId> = source
            .ann
            .present_tubes()
            .iter()
            .map(|t| t.tube_id)
            .collect();
        let mut selected = Vec::new();
        if apply && !candidates.is_empty() {
            selected = candidates
                .iter()
                .copied()
                .filter(|_| rng.random_bool(TUBE_SELECT_PROBABILITY))
                .collect();
            if selected.is_empty() {
                selected.push(candidates[rng.random_range(0..candidates.len())]);
            }
        }
        Self {
            source,
            target,
            source_classes: classes,
            target_classes: classes,
            selected,
            apply,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.source_classes != self.target_classes {
            return Err(Error::Augment(
                "source and target use different class tables".into(),
            ));
        }
        let (s, t) = (&self.source.clip, &self.target.clip);
        if (s.frames(), s.height(), s.width()) != (t.frames(), t.height(), t.width()) {
            return Err(Error::Augment(format!(
                "source is {}×{}×{} but target is {}×{}×{}",
                s.frames(),
                s.height(),
                s.width(),
                t.frames(),
                t.height(),
                t.width()
            )));
        }
        if s.depth().is_some() != t.depth().is_some() {
            return Err(Error::Augment(
                "only one of source and target carries depth".into(),
            ));
        }
        for &id in &self.selected {
            if self.source.ann.tube(id).is_none() {
                return Err(Error::Augment(format!(
                    "selected tube {id} is not in the source"
                )));
            }
        }
        Ok(())
    }
}

/// Pastes the selected source tubes on top of the target across all frames.
///
/// Pasted things get fresh tube and track ids. A pasted stuff tube whose
/// class already has a tube in the target joins that tube. Target tubes left
/// without pixels are dropped.
pub fn clip_paste(spec: &PasteSpec<'_>) -> Result<LabeledClip> {
    spec.check()?;
    let mut out = spec.target.clone();
    if !spec.apply || spec.selected.is_empty() {
        return Ok(out);
    }
    let mut next_tube = out
        .ann
        .tubes
        .iter()
        .map(|t| t.tube_id)
        .max()
        .unwrap_or(VOID_TUBE);
    let mut next_track = out.ann.tubes.iter().map(|t| t.track_id).max().unwrap_or(0);
    let mut id_map: BTreeMap<TubeId, TubeId> = BTreeMap::new();
    for &sid in &spec.selected {
        let src = *spec.source.ann.tube(sid).expect("checked above");
        let existing_stuff = (!src.is_thing)
            .then(|| {
                out.ann
                    .tubes
                    .iter()
                    .find(|t| !t.is_thing && t.class_id == src.class_id)
            })
            .flatten();
        let new_id = match existing_stuff {
            Some(t) => t.tube_id,
            None => {
                next_tube = next_tube
                    .checked_add(1)
                    .ok_or_else(|| Error::Augment("tube ids exhausted".into()))?;
                next_track += 1;
                out.ann.tubes.push(Tube {
                    tube_id: next_tube,
                    track_id: next_track,
                    ..src
                });
                next_tube
            }
        };
        id_map.insert(sid, new_id);
    }

    let src_rgb = spec.source.clip.rgb();
    let src_depth = spec.source.clip.depth();
    for (p, &sid) in spec.source.ann.label_map.iter().enumerate() {
        let Some(&new_id) = id_map.get(&sid) else {
            continue;
        };
        out.ann.label_map[p] = new_id;
        out.clip.rgb_mut()[3 * p..3 * p + 3].copy_from_slice(&src_rgb[3 * p..3 * p + 3]);
        if let (Some(dst), Some(src)) = (out.clip.depth_mut(), src_depth) {
            dst[p] = src[p];
        }
    }

    let areas = out.ann.tube_areas();
    out.ann.tubes.retain(|t| areas.contains_key(&t.tube_id));
    out.ann.tubes.sort_by_key(|t| t.tube_id);
    if let Some(v) = validate_annotation(&out.ann, spec.target_classes)
        .into_iter()
        .next()
    {
        return Err(Error::Augment(format!("pasted annotation is invalid: {v}")));
    }
    Ok(out)
}
