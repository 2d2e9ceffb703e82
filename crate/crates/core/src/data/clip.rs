use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::classes::{ClassId, ClassTable, VOID_CLASS};
use crate::error::{Error, Result};

pub type TubeId = u16;
pub type TrackId = u32;

/// Label-map value reserved for void / unlabeled pixels.
pub const VOID_TUBE: TubeId = 0;

/// `T` frames of `H×W` RGB pixels, optionally with metric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    rgb: Vec<u8>,
    depth: Option<Vec<f64>>,
    d_max: f64,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        rgb: Vec<u8>,
        depth: Option<Vec<f64>>,
        d_max: f64,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "clip extents must be positive, got {frames}×{height}×{width}"
            )));
        }
        let pixels = frames * height * width;
        if rgb.len() != pixels * 3 {
            return Err(Error::Parameter(format!(
                "expected {} rgb bytes, got {}",
                pixels * 3,
                rgb.len()
            )));
        }
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "d_max must be positive, got {d_max}"
            )));
        }
        if let Some(d) = &depth {
            if d.len() != pixels {
                return Err(Error::Parameter(format!(
                    "expected {pixels} depth values, got {}",
                    d.len()
                )));
            }
            if let Some(bad) = d.iter().find(|&&v| !(v > 0.0 && v <= d_max)) {
                return Err(Error::Parameter(format!(
                    "depth value {bad} outside (0, {d_max}]"
                )));
            }
        }
        Ok(Self {
            frames,
            height,
            width,
            rgb,
            depth,
            d_max,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    /// `T×H×W×3` interleaved bytes.
    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn depth(&self) -> Option<&[f64]> {
        self.depth.as_deref()
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Frames `start..start + len` as a new clip.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Parameter(format!(
                "frame range {start}..{} outside clip of {} frames",
                start + len,
                self.frames
            )));
        }
        let hw = self.pixels_per_frame();
        let rgb = self.rgb[start * hw * 3..(start + len) * hw * 3].to_vec();
        let depth = self
            .depth
            .as_ref()
            .map(|d| d[start * hw..(start + len) * hw].to_vec());
        Self::new(len, self.height, self.width, rgb, depth, self.d_max)
    }

    pub(crate) fn rgb_mut(&mut self) -> &mut [u8] {
        &mut self.rgb
    }

    pub(crate) fn depth_mut(&mut self) -> Option<&mut [f64]> {
        self.depth.as_deref_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tube {
    pub tube_id: TubeId,
    pub class_id: ClassId,
    pub is_thing: bool,
    /// Whole-video identity, stable across clips.
    pub track_id: TrackId,
}

/// Per-pixel tube ids plus the tube table. Fields are public: use
/// [`validate_annotation`] to check the invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TubeAnnotation {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `T×H×W` tube ids; [`VOID_TUBE`] marks unlabeled pixels.
    pub label_map: Vec<TubeId>,
    pub tubes: Vec<Tube>,
}

impl TubeAnnotation {
    pub fn void(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            label_map: vec![VOID_TUBE; frames * height * width],
            tubes: Vec::new(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tube(&self, id: TubeId) -> Option<&Tube> {
        self.tubes.iter().find(|t| t.tube_id == id)
    }

    /// Pixel count per tube id (void excluded).
    pub fn tube_areas(&self) -> BTreeMap<TubeId, usize> {
        let mut areas = BTreeMap::new();
        for &id in &self.label_map {
            if id != VOID_TUBE {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
        areas
    }

    pub fn labeled_pixels(&self) -> usize {
        self.label_map.iter().filter(|&&id| id != VOID_TUBE).count()
    }

    /// Tubes that cover at least one pixel, in table order.
    pub fn present_tubes(&self) -> Vec<Tube> {
        let areas = self.tube_areas();
        self.tubes
            .iter()
            .filter(|t| areas.contains_key(&t.tube_id))
            .copied()
            .collect()
    }

    /// Per-pixel class ids; void pixels map to [`VOID_CLASS`].
    pub fn class_map(&self) -> Vec<ClassId> {
        let lookup: BTreeMap<TubeId, ClassId> =
            self.tubes.iter().map(|t| (t.tube_id, t.class_id)).collect();
        self.label_map
            .iter()
            .map(|id| lookup.get(id).copied().unwrap_or(VOID_CLASS))
            .collect()
    }

    /// Binary mask of one tube as 0/1 values over `T×H×W`.
    pub fn mask(&self, id: TubeId) -> Vec<f64> {
        self.label_map
            .iter()
            .map(|&l| if l == id && id != VOID_TUBE { 1.0 } else { 0.0 })
            .collect()
    }

    /// Frames `start..start + len`; tubes absent from the range are dropped.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Parameter(format!(
                "frame range {start}..{} outside annotation of {} frames",
                start + len,
                self.frames
            )));
        }
        let hw = self.height * self.width;
        let label_map = self.label_map[start * hw..(start + len) * hw].to_vec();
        let present: BTreeSet<TubeId> = label_map.iter().copied().collect();
        let tubes = self
            .tubes
            .iter()
            .filter(|t| present.contains(&t.tube_id))
            .copied()
            .collect();
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            label_map,
            tubes,
        })
    }

    pub fn pixel_index(&self, flat: usize) -> PixelIndex {
        let hw = self.height * self.width;
        PixelIndex {
            t: flat / hw,
            h: (flat % hw) / self.width,
            w: flat % self.width,
        }
    }
}

/// A clip with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub ann: TubeAnnotation,
}

impl LabeledClip {
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            clip: self.clip.slice_frames(start, len)?,
            ann: self.ann.slice_frames(start, len)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PixelIndex {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl fmt::Display for PixelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, h={}, w={})", self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ShapeMismatch {
        expected: usize,
        actual: usize,
    },
    ReservedTubeId,
    /// The same tube id is listed twice, so its pixels belong to two tubes.
    OverlappingTubes {
        tube_id: TubeId,
        first_pixel: Option<PixelIndex>,
    },
    UnknownTube {
        tube_id: TubeId,
        pixel: PixelIndex,
    },
    DuplicateStuffTube {
        class_id: ClassId,
    },
    DuplicateTrack {
        track_id: TrackId,
    },
    UnknownClass {
        tube_id: TubeId,
        class_id: ClassId,
    },
    ThingFlagMismatch {
        tube_id: TubeId,
        class_id: ClassId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ShapeMismatch { expected, actual } => {
                write!(f, "label map has {actual} pixels, expected {expected}")
            }
            Violation::ReservedTubeId => write!(f, "tube table uses reserved void id 0"),
            Violation::OverlappingTubes {
                tube_id,
                first_pixel,
            } => {
                write!(
                    f,
                    "overlapping tubes: id {tube_id} is listed more than once"
                )?;
                if let Some(p) = first_pixel {
                    write!(f, ", first offending pixel {p}")?;
                }
                Ok(())
            }
            Violation::UnknownTube { tube_id, pixel } => write!(
                f,
                "tube id {tube_id} at pixel {pixel} is absent from the tube table"
            ),
            Violation::DuplicateStuffTube { class_id } => {
                write!(f, "duplicate stuff tube for class {class_id}")
            }
            Violation::DuplicateTrack { track_id } => {
                write!(f, "track id {track_id} used by more than one tube")
            }
            Violation::UnknownClass { tube_id, class_id } => {
                write!(
                    f,
                    "tube {tube_id} has class {class_id} missing from the class table"
                )
            }
            Violation::ThingFlagMismatch { tube_id, class_id } => write!(
                f,
                "tube {tube_id} thing flag disagrees with class {class_id}"
            ),
        }
    }
}

/// Checks that need no class table: shape, id uniqueness, coverage of the
/// label map by the tube table, and stuff uniqueness by the tubes' own flags.
pub fn validate_structure(ann: &TubeAnnotation) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected = ann.frames * ann.height * ann.width;
    if ann.label_map.len() != expected {
        out.push(Violation::ShapeMismatch {
            expected,
            actual: ann.label_map.len(),
        });
        return out;
    }
    let first_pixel = |id: TubeId| {
        ann.label_map
            .iter()
            .position(|&l| l == id)
            .map(|p| ann.pixel_index(p))
    };

    let mut seen_ids = BTreeSet::new();
    let mut seen_tracks = BTreeSet::new();
    let mut seen_stuff = BTreeSet::new();
    for tube in &ann.tubes {
        if tube.tube_id == VOID_TUBE {
            out.push(Violation::ReservedTubeId);
            continue;
        }
        if !seen_ids.insert(tube.tube_id) {
            out.push(Violation::OverlappingTubes {
                tube_id: tube.tube_id,
                first_pixel: first_pixel(tube.tube_id),
            });
        }
        if !seen_tracks.insert(tube.track_id) {
            out.push(Violation::DuplicateTrack {
                track_id: tube.track_id,
            });
        }
        if !tube.is_thing && !seen_stuff.insert(tube.class_id) {
            out.push(Violation::DuplicateStuffTube {
                class_id: tube.class_id,
            });
        }
    }
    let mut reported = BTreeSet::new();
    for (p, &id) in ann.label_map.iter().enumerate() {
        if id != VOID_TUBE && !seen_ids.contains(&id) && reported.insert(id) {
            out.push(Violation::UnknownTube {
                tube_id: id,
                pixel: ann.pixel_index(p),
            });
        }
    }
    out
}

/// Empty iff the annotation is a valid partition consistent with `table`.
pub fn validate_annotation(ann: &TubeAnnotation, table: &ClassTable) -> Vec<Violation> {
    let mut out = validate_structure(ann);
    for tube in &ann.tubes {
        match table.is_thing(tube.class_id) {
            None => out.push(Violation::UnknownClass {
                tube_id: tube.tube_id,
                class_id: tube.class_id,
            }),
            Some(is_thing) if is_thing != tube.is_thing => out.push(Violation::ThingFlagMismatch {
                tube_id: tube.tube_id,
                class_id: tube.class_id,
            }),
            Some(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ClassTable {
        ClassTable::from_names([("car", true), ("road", false)]).unwrap()
    }

    fn ann() -> TubeAnnotation {
        TubeAnnotation {
            frames: 1,
            height: 2,
            width: 2,
            label_map: vec![1, 1, 2, 0],
            tubes: vec![
                Tube {
                    tube_id: 1,
                    class_id: 1,
                    is_thing: false,
                    track_id: 1,
                },
                Tube {
                    tube_id: 2,
                    class_id: 0,
                    is_thing: true,
                    track_id: 2,
                },
            ],
        }
    }

    #[test]
    fn valid_annotation_has_no_violations() {
        assert!(validate_annotation(&ann(), &table()).is_empty());
    }

    #[test]
    fn duplicate_stuff_class_is_reported() {
        let mut a = ann();
        a.label_map[3] = 3;
        a.tubes.push(Tube {
            tube_id: 3,
            class_id: 1,
            is_thing: false,
            track_id: 3,
        });
        let v = validate_annotation(&a, &table());
        assert_eq!(v, vec![Violation::DuplicateStuffTube { class_id: 1 }]);
        assert!(v[0].to_string().contains("duplicate stuff tube"));
    }

    #[test]
    fn label_missing_from_table_is_reported() {
        let mut a = ann();
        a.label_map[3] = 9;
        let v = validate_annotation(&a, &table());
        assert_eq!(
            v,
            vec![Violation::UnknownTube {
                tube_id: 9,
                pixel: PixelIndex { t: 0, h: 1, w: 1 }
            }]
        );
    }

    #[test]
    fn class_and_flag_consistency() {
        let mut a = ann();
        a.tubes[1].class_id = 7;
        a.tubes[0].is_thing = true;
        let v = validate_annotation(&a, &table());
        assert!(v.contains(&Violation::UnknownClass {
            tube_id: 2,
            class_id: 7
        }));
        assert!(v.contains(&Violation::ThingFlagMismatch {
            tube_id: 1,
            class_id: 1
        }));
    }

    #[test]
    fn slicing_drops_absent_tubes() {
        let a = TubeAnnotation {
            frames: 2,
            height: 1,
            width: 2,
            label_map: vec![1, 2, 1, 1],
            tubes: vec![
                Tube {
                    tube_id: 1,
                    class_id: 1,
                    is_thing: false,
                    track_id: 1,
                },
                Tube {
                    tube_id: 2,
                    class_id: 0,
                    is_thing: true,
                    track_id: 2,
                },
            ],
        };
        let s = a.slice_frames(1, 1).unwrap();
        assert_eq!(s.tubes.len(), 1);
        assert_eq!(s.label_map, vec![1, 1]);
    }

    #[test]
    fn clip_rejects_depth_out_of_range() {
        assert!(VideoClip::new(1, 1, 1, vec![0; 3], Some(vec![0.0]), 10.0).is_err());
        assert!(VideoClip::new(1, 1, 1, vec![0; 3], Some(vec![11.0]), 10.0).is_err());
        assert!(VideoClip::new(1, 1, 1, vec![0; 3], Some(vec![10.0]), 10.0).is_ok());
    }
}
