//! Backbone, axial / latent / global dual-path blocks, and output heads.

mod config;
pub mod layers;
mod memory;
mod network;
mod params;

pub use config::ModelConfig;
pub use memory::{init_memory, SlotLayout};
pub use network::{
    axial_block, backbone_frames, depth_activation, depth_head, forward, global_block,
    latent_block, latent_per_frame, normalized_frames, output_heads, stack_channels_last,
    ClipForward, HeadOutputs, Model, TubePrediction,
};
pub use params::{param_specs, Bound, Init, ParamSpec, Parameters};
