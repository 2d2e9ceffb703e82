//! TSEG little-endian container for one annotated clip.

use std::path::Path;

use super::clip::{validate_structure, LabeledClip, Tube, TubeAnnotation, VideoClip};
use crate::error::{io_error, Error, Result};

const MAGIC: &[u8; 4] = b"TSEG";
const VERSION: u32 = 1;
const FLAG_DEPTH: u8 = 1;

pub fn encode_clip(clip: &VideoClip, ann: &TubeAnnotation) -> Result<Vec<u8>> {
    if (ann.frames, ann.height, ann.width) != (clip.frames(), clip.height(), clip.width()) {
        return Err(Error::Parameter(format!(
            "annotation is {}×{}×{} but clip is {}×{}×{}",
            ann.frames,
            ann.height,
            ann.width,
            clip.frames(),
            clip.height(),
            clip.width()
        )));
    }
    if let Some(v) = validate_structure(ann).into_iter().next() {
        return Err(Error::Validation(v));
    }
    let pixels = ann.pixel_count();
    let mut out = Vec::with_capacity(33 + pixels * 5 + ann.tubes.len() * 9);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for extent in [clip.frames(), clip.height(), clip.width()] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    out.push(if clip.depth().is_some() {
        FLAG_DEPTH
    } else {
        0
    });
    out.extend_from_slice(&clip.d_max().to_le_bytes());
    out.extend_from_slice(clip.rgb());
    if let Some(depth) = clip.depth() {
        for d in depth {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for id in &ann.label_map {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out.extend_from_slice(&(ann.tubes.len() as u32).to_le_bytes());
    for t in &ann.tubes {
        out.extend_from_slice(&t.tube_id.to_le_bytes());
        out.extend_from_slice(&t.class_id.to_le_bytes());
        out.push(u8::from(t.is_thing));
        out.extend_from_slice(&t.track_id.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode_clip(bytes: &[u8]) -> Result<LabeledClip> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected TSEG".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let frames = r.u32("T")? as usize;
    let height = r.u32("H")? as usize;
    let width = r.u32("W")? as usize;
    let flags = r.u8("flags")?;
    if flags & !FLAG_DEPTH != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    let d_max = r.f64("d_max")?;
    let pixels = frames
        .checked_mul(height)
        .and_then(|p| p.checked_mul(width))
        .filter(|&p| p.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::Format(format!("implausible extents {frames}×{height}×{width}")))?;
    let rgb = r.take(pixels * 3, "rgb")?.to_vec();
    let depth = if flags & FLAG_DEPTH != 0 {
        let raw = r.take(pixels * 8, "depth")?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        )
    } else {
        None
    };
    let label_map = r
        .take(pixels * 2, "label map")?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let count = r.u32("tube count")? as usize;
    let mut tubes = Vec::with_capacity(count.min(bytes.len() / 9));
    for _ in 0..count {
        let tube_id = r.u16("tube id")?;
        let class_id = r.u16("class id")?;
        let is_thing = match r.u8("thing flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad thing flag {other}"))),
        };
        let track_id = r.u32("track id")?;
        tubes.push(Tube {
            tube_id,
            class_id,
            is_thing,
            track_id,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tube table",
            bytes.len() - r.pos
        )));
    }
    let clip = VideoClip::new(frames, height, width, rgb, depth, d_max)
        .map_err(|e| Error::Format(e.to_string()))?;
    let ann = TubeAnnotation {
        frames,
        height,
        width,
        label_map,
        tubes,
    };
    if let Some(v) = validate_structure(&ann).into_iter().next() {
        return Err(Error::Validation(v));
    }
    Ok(LabeledClip { clip, ann })
}

pub fn save_clip(clip: &VideoClip, ann: &TubeAnnotation, path: &Path) -> Result<()> {
    let bytes = encode_clip(clip, ann)?;
    std::fs::write(path, bytes).map_err(io_error(path))
}

pub fn load_clip(path: &Path) -> Result<LabeledClip> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    decode_clip(&bytes)
}
