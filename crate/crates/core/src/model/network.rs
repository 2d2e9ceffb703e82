use tubeseg_autodiff::{Tape, Tensor, Var};

use super::config::ModelConfig;
use super::layers::{attention_update, conv_bias, ffn_update, layer_norm, linear, KeySource};
use super::params::{Bound, Parameters};
use crate::data::VideoClip;
use crate::error::{Error, Result};

/// Keeps sigmoid depth strictly inside `(0, d_max)` even when the sigmoid
/// saturates in floating point.
const DEPTH_MARGIN: f64 = 1e-12;

/// Tape variables produced by one clip forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClipForward {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Backbone features `[T×H×W×C]`.
    pub backbone: Var,
    /// Final clip pixel features `[THW×C]`.
    pub pixels: Var,
    /// Decoded pixel features `x^{v'}`, `[THW×C]`.
    pub decoded: Var,
    /// Refined global memory `[N×C]`.
    pub memory: Var,
    /// Tube embeddings `w`, `[N×C]`.
    pub embeddings: Var,
    /// `[N×(D+1)]`, ∅ last.
    pub class_logits: Var,
    pub class_probs: Var,
    /// `[N×THW]`.
    pub tube_logits: Var,
    /// Softmax of `tube_logits` over the slot axis.
    pub tube_probs: Var,
    /// `[THW×D]`.
    pub semantic_logits: Var,
    /// `[THW]` metric depth.
    pub depth: Option<Var>,
}

/// Maps RGB bytes to `[-1, 1]` and lays frame `t` out as `[3×H×W]`.
pub fn normalized_frames(clip: &VideoClip) -> Result<Vec<Tensor>> {
    let (h, w) = (clip.height(), clip.width());
    let hw = h * w;
    (0..clip.frames())
        .map(|t| {
            let rgb = &clip.rgb()[t * hw * 3..(t + 1) * hw * 3];
            Tensor::from_fn(vec![3, h, w], |i| {
                let (c, p) = (i / hw, i % hw);
                (rgb[p * 3 + c] as f64 / 255.0 - 0.5) * 2.0
            })
            .map_err(Error::from)
        })
        .collect()
}

/// Three conv+ReLU layers applied to each `[3×H×W]` frame independently.
/// Returns per-frame `[C×H×W]` features.
pub fn backbone_frames(tape: &mut Tape, p: &Bound, frames: &[Var]) -> Result<Vec<Var>> {
    frames
        .iter()
        .map(|&f| {
            let mut x = f;
            for k in 0..3 {
                x = conv_bias(tape, p, &format!("backbone.conv{k}"), x)?;
                x = tape.relu(x);
            }
            Ok(x)
        })
        .collect()
}

/// Stacks per-frame `[C×H×W]` features into `[T×H×W×C]`.
pub fn stack_channels_last(tape: &mut Tape, frames: &[Var]) -> Result<Var> {
    let shape = tape.shape(frames[0]).to_vec();
    let mut expanded = Vec::with_capacity(frames.len());
    for &f in frames {
        expanded.push(tape.reshape(f, vec![1, shape[0], shape[1], shape[2]])?);
    }
    let stacked = tape.concat(&expanded, 0)?;
    Ok(tape.permute(stacked, &[0, 2, 3, 1])?)
}

/// Height-axis then width-axis self-attention within each frame of
/// `[T×H×W×C]` features.
pub fn axial_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let &[t, h, w, c] = tape.shape(x) else {
        return Err(Error::Contract(format!(
            "axial block expects [T,H,W,C], got {:?}",
            tape.shape(x)
        )));
    };
    let cols = tape.permute(x, &[0, 2, 1, 3])?;
    let cols = tape.reshape(cols, vec![t * w, h, c])?;
    let cols = attention_update(
        tape,
        p,
        &format!("{prefix}.height"),
        cols,
        KeySource::Queries,
    )?;
    let cols = tape.reshape(cols, vec![t, w, h, c])?;
    let x = tape.permute(cols, &[0, 2, 1, 3])?;
    let rows = tape.reshape(x, vec![t * h, w, c])?;
    let rows = attention_update(
        tape,
        p,
        &format!("{prefix}.width"),
        rows,
        KeySource::Queries,
    )?;
    Ok(tape.reshape(rows, vec![t, h, w, c])?)
}

/// Copies the `[L×C]` initial latent memory once per frame.
pub fn latent_per_frame(tape: &mut Tape, init: Var, frames: usize) -> Result<Var> {
    let (l, c) = (tape.shape(init)[0], tape.shape(init)[1]);
    let indices = (0..frames).flat_map(|_| 0..l * c).collect();
    Ok(tape.gather(init, indices, vec![frames, l, c])?)
}

/// Frame-level dual-path block: latent attends to pixels (L2F), latent
/// self-attention (L2L), then pixels attend to latent (F2L). Frames are
/// processed as independent batch items.
pub fn latent_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    latent: Var,
) -> Result<(Var, Var)> {
    let &[t, h, w, c] = tape.shape(x) else {
        return Err(Error::Contract(format!(
            "latent block expects [T,H,W,C], got {:?}",
            tape.shape(x)
        )));
    };
    let pixels = tape.reshape(x, vec![t, h * w, c])?;
    let latent = attention_update(
        tape,
        p,
        &format!("{prefix}.l2f"),
        latent,
        KeySource::Other(pixels),
    )?;
    let latent = attention_update(
        tape,
        p,
        &format!("{prefix}.l2l"),
        latent,
        KeySource::Queries,
    )?;
    let pixels = attention_update(
        tape,
        p,
        &format!("{prefix}.f2l"),
        pixels,
        KeySource::Other(latent),
    )?;
    Ok((tape.reshape(pixels, vec![t, h, w, c])?, latent))
}

/// Clip-level dual-path block on flattened `[THW×C]` pixels and `[N×C]`
/// memory. Memory queries attend to the pixels and to the memory itself in
/// one softmax (M2V with M2M), then pixels attend to the updated memory
/// (V2M). Both paths end with a feed-forward update.
pub fn global_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    pixels: Var,
    memory: Var,
) -> Result<(Var, Var)> {
    let (thw, c) = (tape.shape(pixels)[0], tape.shape(pixels)[1]);
    let n = tape.shape(memory)[0];
    let v = tape.reshape(pixels, vec![1, thw, c])?;
    let m = tape.reshape(memory, vec![1, n, c])?;
    let m = attention_update(
        tape,
        p,
        &format!("{prefix}.m2v"),
        m,
        KeySource::OtherThenQueries(v),
    )?;
    let m = ffn_update(tape, p, &format!("{prefix}.ffn_m"), m)?;
    let v = attention_update(tape, p, &format!("{prefix}.v2m"), v, KeySource::Other(m))?;
    let v = ffn_update(tape, p, &format!("{prefix}.ffn_v"), v)?;
    Ok((tape.reshape(v, vec![thw, c])?, tape.reshape(m, vec![n, c])?))
}

/// Sigmoid depth in `(0, d_max)` from per-frame `[C×H×W]` backbone features.
/// Returns `[THW]`.
pub fn depth_head(tape: &mut Tape, p: &Bound, features: &[Var], d_max: f64) -> Result<Var> {
    if !p.has("depth.conv1.weight") {
        return Err(Error::Config(
            "depth head is disabled in this configuration".into(),
        ));
    }
    let mut outs = Vec::with_capacity(features.len());
    for &f in features {
        let x = conv_bias(tape, p, "depth.conv1", f)?;
        let x = tape.relu(x);
        let x = conv_bias(tape, p, "depth.conv2", x)?;
        outs.push(depth_activation(tape, x, d_max));
    }
    let all = tape.concat(&outs, 0)?;
    let len = tape.value(all).len();
    Ok(tape.reshape(all, vec![len])?)
}

/// `d_max·sigmoid(x)`, pulled inside the open interval by a tiny margin.
pub fn depth_activation(tape: &mut Tape, x: Var, d_max: f64) -> Var {
    let s = tape.sigmoid(x);
    tape.affine(s, (1.0 - 2.0 * DEPTH_MARGIN) * d_max, DEPTH_MARGIN * d_max)
}

/// Full clip forward with already-bound parameters.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    config: &ModelConfig,
    clip: &VideoClip,
) -> Result<ClipForward> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let c = config.channels;
    let inputs: Vec<Var> = normalized_frames(clip)?
        .into_iter()
        .map(|f| tape.constant(f))
        .collect();
    let features = backbone_frames(tape, p, &inputs)?;
    if tape.shape(features[0])[0] != c {
        return Err(Error::Contract(format!(
            "backbone produced {} channels, config C={c}",
            tape.shape(features[0])[0]
        )));
    }
    let depth = if config.depth_enabled {
        Some(depth_head(tape, p, &features, config.d_max)?)
    } else {
        None
    };
    let backbone = stack_channels_last(tape, &features)?;
    let mut x = backbone;
    let mut latent = latent_per_frame(tape, p.var("latent.init")?, t)?;
    let mut memory = p.var("memory.init")?;
    for b in 0..config.num_blocks {
        x = axial_block(tape, p, &format!("block{b}.axial"), x)?;
        (x, latent) = latent_block(tape, p, &format!("block{b}.latent"), x, latent)?;
        let flat = tape.reshape(x, vec![t * h * w, c])?;
        let (flat, m) = global_block(tape, p, &format!("block{b}.global"), flat, memory)?;
        memory = m;
        x = tape.reshape(flat, vec![t, h, w, c])?;
    }
    let pixels = tape.reshape(x, vec![t * h * w, c])?;
    let heads = output_heads(tape, p, pixels, memory)?;
    Ok(ClipForward {
        frames: t,
        height: h,
        width: w,
        backbone,
        pixels,
        decoded: heads.decoded,
        memory,
        embeddings: heads.embeddings,
        class_logits: heads.class_logits,
        class_probs: heads.class_probs,
        tube_logits: heads.tube_logits,
        tube_probs: heads.tube_probs,
        semantic_logits: heads.semantic_logits,
        depth,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub decoded: Var,
    pub embeddings: Var,
    pub class_logits: Var,
    pub class_probs: Var,
    pub tube_logits: Var,
    pub tube_probs: Var,
    pub semantic_logits: Var,
}

/// Segmentation, class and semantic heads on final pixels and memory.
pub fn output_heads(tape: &mut Tape, p: &Bound, pixels: Var, memory: Var) -> Result<HeadOutputs> {
    let m = layer_norm(tape, p, "head.ln", memory)?;
    let s = linear(tape, m, p.var("seg.w1")?, Some(p.var("seg.b1")?))?;
    let s = tape.relu(s);
    let embeddings = linear(tape, s, p.var("seg.w2")?, None)?;
    let k = linear(tape, m, p.var("class.w1")?, Some(p.var("class.b1")?))?;
    let k = tape.relu(k);
    let class_logits = linear(tape, k, p.var("class.w2")?, Some(p.var("class.b2")?))?;
    let class_probs = tape.softmax(class_logits, 1)?;
    let decoded = layer_norm(tape, p, "decode.ln", pixels)?;
    let decoded_t = tape.transpose(decoded)?;
    let tube_logits = tape.matmul(embeddings, decoded_t)?;
    let tube_probs = tape.softmax(tube_logits, 0)?;
    let semantic_logits = linear(
        tape,
        decoded,
        p.var("semantic.w")?,
        Some(p.var("semantic.b")?),
    )?;
    Ok(HeadOutputs {
        decoded,
        embeddings,
        class_logits,
        class_probs,
        tube_logits,
        tube_probs,
        semantic_logits,
    })
}

/// Plain-value outputs of a forward pass, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TubePrediction {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub memory: usize,
    pub classes: usize,
    /// `[N×(D+1)]` row-major.
    pub class_probs: Vec<f64>,
    /// `[N×THW]` row-major.
    pub tube_probs: Vec<f64>,
    pub tube_logits: Vec<f64>,
    /// `[THW×D]` row-major.
    pub semantic_logits: Vec<f64>,
    pub depth: Option<Vec<f64>>,
}

impl TubePrediction {
    pub fn from_forward(tape: &Tape, f: &ClipForward) -> Self {
        let n = tape.shape(f.class_probs)[0];
        let classes = tape.shape(f.class_probs)[1] - 1;
        Self {
            frames: f.frames,
            height: f.height,
            width: f.width,
            memory: n,
            classes,
            class_probs: tape.value(f.class_probs).data().to_vec(),
            tube_probs: tape.value(f.tube_probs).data().to_vec(),
            tube_logits: tape.value(f.tube_logits).data().to_vec(),
            semantic_logits: tape.value(f.semantic_logits).data().to_vec(),
            depth: f.depth.map(|d| tape.value(d).data().to_vec()),
        }
    }

    pub fn pixels(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn class_row(&self, slot: usize) -> &[f64] {
        let k = self.classes + 1;
        &self.class_probs[slot * k..(slot + 1) * k]
    }

    pub fn tube_prob(&self, slot: usize, pixel: usize) -> f64 {
        self.tube_probs[slot * self.pixels() + pixel]
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_config(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = Parameters::init(&config)?;
        Ok(Self { config, params })
    }

    /// Inference forward pass without gradient bookkeeping.
    pub fn predict(&self, clip: &VideoClip) -> Result<TubePrediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = forward(&mut tape, &bound, &self.config, clip)?;
        Ok(TubePrediction::from_forward(&tape, &f))
    }
}
