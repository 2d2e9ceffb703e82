use crate::data::{ClassId, TubeAnnotation, TubeId, VOID_CLASS, VOID_TUBE};

/// One ground-truth tube as a dense binary mask over the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTube {
    pub tube_id: TubeId,
    pub class_id: ClassId,
    pub is_thing: bool,
    /// 0/1 over `T×H×W`.
    pub mask: Vec<f64>,
    pub area: usize,
}

/// Dense per-clip training targets derived from an annotation. Only tubes
/// covering at least one pixel take part.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTargets {
    pub tubes: Vec<GtTube>,
    /// Index into `tubes` per pixel; `None` for void.
    pub pixel_tube: Vec<Option<usize>>,
    /// Class per pixel; [`VOID_CLASS`] for void.
    pub pixel_class: Vec<ClassId>,
}

impl ClipTargets {
    pub fn from_annotation(ann: &TubeAnnotation) -> Self {
        let present = ann.present_tubes();
        let mut pixel_tube = vec![None; ann.label_map.len()];
        let mut pixel_class = vec![VOID_CLASS; ann.label_map.len()];
        let mut tubes: Vec<GtTube> = present
            .iter()
            .map(|t| GtTube {
                tube_id: t.tube_id,
                class_id: t.class_id,
                is_thing: t.is_thing,
                mask: vec![0.0; ann.label_map.len()],
                area: 0,
            })
            .collect();
        for (p, &id) in ann.label_map.iter().enumerate() {
            if id == VOID_TUBE {
                continue;
            }
            if let Some(k) = present.iter().position(|t| t.tube_id == id) {
                pixel_tube[p] = Some(k);
                pixel_class[p] = tubes[k].class_id;
                tubes[k].mask[p] = 1.0;
                tubes[k].area += 1;
            }
        }
        Self {
            tubes,
            pixel_tube,
            pixel_class,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_tube.len()
    }

    pub fn labeled_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pixel_tube
            .iter()
            .enumerate()
            .filter_map(|(p, k)| k.map(|k| (p, k)))
    }
}
