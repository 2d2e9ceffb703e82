//! Clips, tube annotations, their on-disk formats, and synthetic videos.

mod classes;
mod clip;
mod manifest;
pub mod synthetic;
mod tseg;

pub use classes::{ClassEntry, ClassId, ClassTable, VOID_CLASS};
pub use clip::{
    validate_annotation, validate_structure, LabeledClip, PixelIndex, TrackId, Tube,
    TubeAnnotation, TubeId, VideoClip, Violation, VOID_TUBE,
};
pub use manifest::{manifest_dir, DatasetManifest};
pub use synthetic::{
    generate_synthetic_sequence, generate_synthetic_video, Scene, SceneObject, Shape,
    SyntheticVideo,
};
pub use tseg::{decode_clip, encode_clip, load_clip, save_clip};
