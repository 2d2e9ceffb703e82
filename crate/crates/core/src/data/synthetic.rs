//! Moving rectangles and ellipses over banded stuff backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::classes::{ClassId, ClassTable};
use super::clip::{LabeledClip, Tube, TubeAnnotation, TubeId, VideoClip, VOID_TUBE};
use crate::error::{Error, Result};

pub const SYNTHETIC_D_MAX: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// One object with constant velocity. Position is the top-left corner of its
/// bounding box at frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub class_id: ClassId,
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
    pub vy: i64,
    pub vx: i64,
    pub depth: f64,
    pub color: [u8; 3],
}

impl SceneObject {
    pub fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let top = self.top + self.vy * t as i64;
        let left = self.left + self.vx * t as i64;
        let (dy, dx) = (y as i64 - top, x as i64 - left);
        let (h, w) = (self.height as i64, self.width as i64);
        if dy < 0 || dx < 0 || dy >= h || dx >= w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let ny = (dy as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let nx = (dx as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                nx * nx + ny * ny <= 1.0
            }
        }
    }

    /// IoU of the full (unoccluded) rectangle between frames `t` and `t + 1`.
    pub fn rect_step_iou(&self) -> f64 {
        let (h, w) = (self.height as f64, self.width as f64);
        let ih = (h - self.vy.unsigned_abs() as f64).max(0.0);
        let iw = (w - self.vx.unsigned_abs() as f64).max(0.0);
        let inter = ih * iw;
        inter / (2.0 * h * w - inter)
    }
}

/// Explicit scene description: `num_stuff` horizontal bands, objects drawn in
/// order so later objects occlude earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub table: ClassTable,
    pub stuff_colors: Vec<[u8; 3]>,
    pub stuff_depths: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

/// A whole rendered video with its generating scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub table: ClassTable,
    pub video: LabeledClip,
    pub objects: Vec<SceneObject>,
    /// Tube id of each object, in object order.
    pub object_tubes: Vec<TubeId>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round() as u8)
}

/// Class table with `min(num_things, 2)` thing classes followed by `num_stuff`
/// stuff classes.
pub fn synthetic_class_table(num_things: usize, num_stuff: usize) -> Result<ClassTable> {
    let things = (0..num_things.min(2)).map(|i| (format!("thing{i}"), true));
    let stuff = (0..num_stuff).map(|i| (format!("stuff{i}"), false));
    ClassTable::from_names(things.chain(stuff))
}

impl Scene {
    /// Band index of row `y` for `num_stuff` equal-height bands.
    fn band(&self, y: usize) -> usize {
        y * self.stuff_depths.len() / self.height
    }

    pub fn render(&self) -> Result<SyntheticVideo> {
        let stuff = self.table.stuff_classes();
        let num_stuff = stuff.len();
        if num_stuff == 0 {
            return Err(Error::Parameter(
                "a scene needs at least one stuff class".into(),
            ));
        }
        if self.frames == 0 || self.height < num_stuff || self.width == 0 {
            return Err(Error::Parameter(format!(
                "scene {}×{}×{} cannot hold {num_stuff} stuff bands",
                self.frames, self.height, self.width
            )));
        }
        if self.stuff_colors.len() != num_stuff || self.stuff_depths.len() != num_stuff {
            return Err(Error::Parameter(
                "one color and depth per stuff class required".into(),
            ));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.table.is_thing(o.class_id) != Some(true) {
                return Err(Error::Parameter(format!(
                    "object {i} uses class {} which is not a thing class",
                    o.class_id
                )));
            }
            if o.height == 0 || o.width == 0 || o.height > self.height || o.width > self.width {
                return Err(Error::Parameter(format!(
                    "object {i} of size {}×{} does not fit a {}×{} frame",
                    o.height, o.width, self.height, self.width
                )));
            }
        }
        let (t_n, h_n, w_n) = (self.frames, self.height, self.width);
        let pixels = t_n * h_n * w_n;
        let mut label_map = vec![VOID_TUBE; pixels];
        let mut rgb = vec![0u8; pixels * 3];
        let mut depth = vec![0.0; pixels];
        let first_object_tube = num_stuff as TubeId + 1;
        for t in 0..t_n {
            for y in 0..h_n {
                for x in 0..w_n {
                    let p = (t * h_n + y) * w_n + x;
                    let band = self.band(y);
                    let mut tube = band as TubeId + 1;
                    let mut color = self.stuff_colors[band];
                    let mut d = self.stuff_depths[band];
                    for (i, o) in self.objects.iter().enumerate() {
                        if o.covers(t, y, x) {
                            tube = first_object_tube + i as TubeId;
                            color = o.color;
                            d = o.depth;
                        }
                    }
                    label_map[p] = tube;
                    rgb[p * 3..p * 3 + 3].copy_from_slice(&color);
                    depth[p] = d;
                }
            }
        }
        let mut tubes: Vec<Tube> = stuff
            .iter()
            .enumerate()
            .map(|(j, &class_id)| Tube {
                tube_id: j as TubeId + 1,
                class_id,
                is_thing: false,
                track_id: j as u32 + 1,
            })
            .collect();
        let object_tubes: Vec<TubeId> = (0..self.objects.len())
            .map(|i| first_object_tube + i as TubeId)
            .collect();
        tubes.extend(self.objects.iter().zip(&object_tubes).map(|(o, &id)| Tube {
            tube_id: id,
            class_id: o.class_id,
            is_thing: true,
            track_id: id as u32,
        }));
        let mut ann = TubeAnnotation {
            frames: t_n,
            height: h_n,
            width: w_n,
            label_map,
            tubes,
        };
        ann.tubes = ann.present_tubes();
        let clip = VideoClip::new(t_n, h_n, w_n, rgb, Some(depth), SYNTHETIC_D_MAX)?;
        Ok(SyntheticVideo {
            table: self.table.clone(),
            video: LabeledClip { clip, ann },
            objects: self.objects.clone(),
            object_tubes,
        })
    }
}

/// Distinct colors for `n` regions spread over the hue circle.
pub fn palette(n: usize, saturation: f64, value: f64, offset: f64) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| hsv_to_rgb(offset + i as f64 / n.max(1) as f64, saturation, value))
        .collect()
}

/// Random scene of `num_things` moving objects over `num_stuff` bands.
pub fn random_scene(
    seed: u64,
    num_frames: usize,
    height: usize,
    width: usize,
    num_things: usize,
    num_stuff: usize,
) -> Result<Scene> {
    if num_frames == 0 {
        return Err(Error::Parameter("num_frames must be positive".into()));
    }
    if height < 4 || width < 4 {
        return Err(Error::Parameter(format!(
            "frame {height}×{width} is too small for objects (minimum 4×4)"
        )));
    }
    if num_stuff == 0 || num_stuff > height {
        return Err(Error::Parameter(format!(
            "num_stuff must be in 1..={height}, got {num_stuff}"
        )));
    }
    let table = synthetic_class_table(num_things, num_stuff)?;
    let thing_classes = table.thing_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stuff_colors = palette(num_stuff, 0.35, 0.45, 0.1);
    let stuff_depths = (0..num_stuff)
        .map(|j| SYNTHETIC_D_MAX * (0.9 - 0.5 * j as f64 / num_stuff as f64))
        .collect();
    let object_colors = palette(num_things, 0.9, 0.95, rng.random::<f64>());
    let span = (num_frames - 1) as i64;
    let mut objects = Vec::with_capacity(num_things);
    for (i, color) in object_colors.into_iter().enumerate() {
        let oh = rng.random_range(height / 4..=height / 2).max(2);
        let ow = rng.random_range(width / 4..=width / 2).max(2);
        let mut pick_axis = |extent: usize, size: usize| {
            let mut v = rng.random_range(-1i64..=1);
            if size as i64 + span * v.abs() > extent as i64 {
                v = 0;
            }
            let room = extent as i64 - size as i64 - span * v.abs();
            let mut start = rng.random_range(0..=room);
            if v < 0 {
                start += span;
            }
            (start, v)
        };
        let (top, vy) = pick_axis(height, oh);
        let (left, vx) = pick_axis(width, ow);
        objects.push(SceneObject {
            shape: if rng.random_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            },
            class_id: thing_classes[i % thing_classes.len()],
            top,
            left,
            height: oh,
            width: ow,
            vy,
            vx,
            depth: rng.random_range(5.0..40.0),
            color,
        });
    }
    Ok(Scene {
        frames: num_frames,
        height,
        width,
        table,
        stuff_colors,
        stuff_depths,
        objects,
    })
}

/// Renders a random scene into a whole-video annotation.
pub fn generate_synthetic_video(
    seed: u64,
    num_frames: usize,
    height: usize,
    width: usize,
    num_things: usize,
    num_stuff: usize,
) -> Result<SyntheticVideo> {
    random_scene(seed, num_frames, height, width, num_things, num_stuff)?.render()
}

impl SyntheticVideo {
    /// Clips of `clip_len` frames overlapping by `clip_len - 1`.
    pub fn clips(&self, clip_len: usize) -> Result<Vec<LabeledClip>> {
        let frames = self.video.clip.frames();
        if clip_len == 0 || clip_len > frames {
            return Err(Error::Parameter(format!(
                "clip length {clip_len} must be in 1..={frames}"
            )));
        }
        (0..=frames - clip_len)
            .map(|s| self.video.slice_frames(s, clip_len))
            .collect()
    }

    /// Pixel IoU of an object's visible tube between frames `t` and `t + 1`.
    pub fn visible_step_iou(&self, object: usize, t: usize) -> f64 {
        let ann = &self.video.ann;
        let id = self.object_tubes[object];
        let hw = ann.height * ann.width;
        let a = &ann.label_map[t * hw..(t + 1) * hw];
        let b = &ann.label_map[(t + 1) * hw..(t + 2) * hw];
        let inter = a
            .iter()
            .zip(b)
            .filter(|(&x, &y)| x == id && y == id)
            .count();
        let union = a
            .iter()
            .zip(b)
            .filter(|(&x, &y)| x == id || y == id)
            .count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Generates the sequence cut into `clip_len`-frame clips with `clip_len - 1`
/// overlap, together with the whole-video truth.
pub fn generate_synthetic_sequence(
    seed: u64,
    num_frames: usize,
    height: usize,
    width: usize,
    num_things: usize,
    num_stuff: usize,
    clip_len: usize,
) -> Result<(Vec<LabeledClip>, SyntheticVideo)> {
    let video = generate_synthetic_video(seed, num_frames, height, width, num_things, num_stuff)?;
    Ok((video.clips(clip_len)?, video))
}
