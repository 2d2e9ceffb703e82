use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::classes::ClassTable;
use super::clip::LabeledClip;
use super::tseg::load_clip;
use crate::error::{io_error, Error, Result};

/// Ordered clips of one video. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub clip_len: usize,
    /// Frames shared by consecutive clips; `clip_len - 1` for stitching.
    pub overlap: usize,
    pub classes: PathBuf,
    pub clips: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut clip_len = None;
        let mut overlap = None;
        let mut classes = None;
        let mut clips = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            if let Some(v) = line.strip_prefix("T=") {
                clip_len = Some(v.parse::<usize>().map_err(|_| bad("bad clip length"))?);
            } else if let Some(v) = line.strip_prefix("overlap=") {
                overlap = Some(v.parse::<usize>().map_err(|_| bad("bad overlap"))?);
            } else if let Some(v) = line.strip_prefix("classes=") {
                classes = Some(PathBuf::from(v));
            } else {
                clips.push(PathBuf::from(line));
            }
        }
        let clip_len = clip_len
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::Format("manifest lacks a positive T= header".into()))?;
        let classes = classes.ok_or_else(|| Error::Format("manifest lacks classes=".into()))?;
        let overlap = overlap.unwrap_or(clip_len - 1);
        if overlap >= clip_len {
            return Err(Error::Format(format!(
                "overlap {overlap} must be below clip length {clip_len}"
            )));
        }
        if clips.is_empty() {
            return Err(Error::Format("manifest lists no clips".into()));
        }
        Ok(Self {
            clip_len,
            overlap,
            classes,
            clips,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "T={}\noverlap={}\nclasses={}\n",
            self.clip_len,
            self.overlap,
            self.classes.display()
        );
        for c in &self.clips {
            let _ = writeln!(out, "{}", c.display());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_error(path))
    }

    /// Start frame of clip `i` within the video.
    pub fn start_frame(&self, i: usize) -> usize {
        i * (self.clip_len - self.overlap)
    }

    /// Loads the class table and every clip, checking clip lengths.
    pub fn load_all(&self, base: &Path) -> Result<(ClassTable, Vec<LabeledClip>)> {
        let table = ClassTable::load(&base.join(&self.classes))?;
        let mut clips = Vec::with_capacity(self.clips.len());
        for rel in &self.clips {
            let clip = load_clip(&base.join(rel))?;
            if clip.clip.frames() != self.clip_len {
                return Err(Error::Format(format!(
                    "{} has {} frames, manifest says T={}",
                    rel.display(),
                    clip.clip.frames(),
                    self.clip_len
                )));
            }
            clips.push(clip);
        }
        Ok((table, clips))
    }
}

/// Directory holding a manifest file, for resolving its relative paths.
pub fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_default_overlap() {
        let m = DatasetManifest::parse("T=2\nclasses=classes.txt\nclip_000.tseg\nclip_001.tseg\n")
            .unwrap();
        assert_eq!(m.overlap, 1);
        assert_eq!(m.start_frame(3), 3);
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn missing_header_is_rejected() {
        assert!(DatasetManifest::parse("classes=c.txt\na.tseg\n").is_err());
        assert!(DatasetManifest::parse("T=2\na.tseg\n").is_err());
        assert!(DatasetManifest::parse("T=2\noverlap=2\nclasses=c\na\n").is_err());
    }
}
