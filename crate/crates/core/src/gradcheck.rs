//! Finite-difference verification of every primitive, block, loss term and
//! the full model on a toy configuration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeseg_autodiff::{
    finite_difference_check, scaled_dot_attention, Tape, Tensor, Var, DEFAULT_STEP,
};

use crate::data::{Tube, TubeAnnotation, VideoClip};
use crate::error::{Error, Result};
use crate::losses::{
    clip_pair_temporal_loss, depth_loss, instance_discrimination_loss, match_predictions,
    pq_style_loss, tube_id_cross_entropy, video_semantic_loss, ClipTargets, Matching, PqFactors,
    INSTANCE_TEMPERATURE, NEG_WEIGHT, SILOG_LAMBDA,
};
use crate::model::{
    axial_block, backbone_frames, depth_head, forward, global_block, latent_block, output_heads,
    Bound, ModelConfig, Parameters, SlotLayout,
};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

/// Small network used by the suite: C=4, N=3, L=2, one block, two classes
/// (one stuff), with a wide init so activations are not near-linear.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        memory: 3,
        latent: 2,
        num_blocks: 1,
        classes: 2,
        stuff_count: 1,
        d_max: 80.0,
        clip_len: 2,
        seed: 11,
        depth_enabled: true,
        init_std: 0.4,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .expect("valid shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.2..2.0)).expect("valid shape")
}

fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = (0..t * h * w * 3).map(|_| rng.random::<u8>()).collect();
    VideoClip::new(t, h, w, rgb, None, 80.0)
}

/// Scalar `Σ w ⊙ y` with fixed random weights.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn flatten(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let flat = parts
        .iter()
        .map(|&v| {
            let n = tape.value(v).len();
            tape.reshape(v, vec![n])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.concat(&flat, 0)?)
}

fn run<F>(name: &str, params: &[Tensor], f: F) -> Result<GradCheckCase>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = finite_difference_check::<Error, _>(f, params, DEFAULT_STEP)?;
    Ok(GradCheckCase {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        elements: report.elements_checked,
    })
}

/// `params` restricted to names starting with any of `prefixes`.
fn subset(params: &Parameters, prefixes: &[&str]) -> Parameters {
    let map: BTreeMap<String, Tensor> = params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Parameters::from_map(map)
}

/// Checks the weighted sum of `build` over parameters plus extra inputs.
fn run_block<F>(
    name: &str,
    params: &Parameters,
    inputs: &[Tensor],
    build: F,
) -> Result<GradCheckCase>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let mut all = params.tensors();
    let np = all.len();
    all.extend(inputs.iter().cloned());
    run(name, &all, |tape, vars| {
        let bound = params.bind_vars(&vars[..np])?;
        let y = build(tape, &bound, &vars[np..])?;
        weighted_sum(tape, y, 99)
    })
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Gen = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn primitive_cases() -> Vec<(&'static str, Gen, Build)> {
    vec![
        (
            "matmul",
            |r| vec![random(r, &[3, 4]), random(r, &[4, 2])],
            |t, v| Ok(t.matmul(v[0], v[1])?),
        ),
        (
            "batch_matmul",
            |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])],
            |t, v| Ok(t.batch_matmul(v[0], v[1])?),
        ),
        (
            "add",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| Ok(t.add(v[0], v[1])?),
        ),
        (
            "sub",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| Ok(t.sub(v[0], v[1])?),
        ),
        (
            "mul",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| Ok(t.mul(v[0], v[1])?),
        ),
        (
            "div",
            |r| vec![random(r, &[3, 2]), away_from_zero(r, &[3, 2])],
            |t, v| Ok(t.div(v[0], v[1])?),
        ),
        (
            "add_along",
            |r| vec![random(r, &[2, 3, 2]), random(r, &[3])],
            |t, v| Ok(t.add_along(v[0], v[1], 1)?),
        ),
        (
            "mul_along",
            |r| vec![random(r, &[2, 3, 2]), random(r, &[2])],
            |t, v| Ok(t.mul_along(v[0], v[1], 2)?),
        ),
        (
            "affine",
            |r| vec![random(r, &[4])],
            |t, v| Ok(t.affine(v[0], -1.7, 0.3)),
        ),
        (
            "scale",
            |r| vec![random(r, &[4])],
            |t, v| Ok(t.scale(v[0], 2.5)),
        ),
        (
            "relu",
            |r| vec![away_from_zero(r, &[6])],
            |t, v| Ok(t.relu(v[0])),
        ),
        (
            "sigmoid",
            |r| vec![random(r, &[6])],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        ("exp", |r| vec![random(r, &[6])], |t, v| Ok(t.exp(v[0]))),
        ("log", |r| vec![positive(r, &[6])], |t, v| Ok(t.log(v[0]))),
        (
            "abs",
            |r| vec![away_from_zero(r, &[6])],
            |t, v| Ok(t.abs(v[0])),
        ),
        (
            "powf",
            |r| vec![positive(r, &[6])],
            |t, v| Ok(t.powf(v[0], -0.5)),
        ),
        (
            "square",
            |r| vec![random(r, &[6])],
            |t, v| Ok(t.square(v[0])),
        ),
        (
            "softmax",
            |r| vec![random(r, &[3, 4])],
            |t, v| Ok(t.softmax(v[0], 0)?),
        ),
        (
            "log_softmax",
            |r| vec![random(r, &[3, 4])],
            |t, v| Ok(t.log_softmax(v[0], 1)?),
        ),
        ("sum", |r| vec![random(r, &[2, 3])], |t, v| Ok(t.sum(v[0]))),
        (
            "mean",
            |r| vec![random(r, &[2, 3])],
            |t, v| Ok(t.mean(v[0])),
        ),
        (
            "sum_axis",
            |r| vec![random(r, &[2, 3, 2])],
            |t, v| Ok(t.sum_axis(v[0], 1)?),
        ),
        (
            "reshape",
            |r| vec![random(r, &[2, 3])],
            |t, v| Ok(t.reshape(v[0], vec![3, 2])?),
        ),
        (
            "permute",
            |r| vec![random(r, &[2, 3, 4])],
            |t, v| Ok(t.permute(v[0], &[2, 0, 1])?),
        ),
        (
            "transpose",
            |r| vec![random(r, &[2, 3])],
            |t, v| Ok(t.transpose(v[0])?),
        ),
        (
            "slice",
            |r| vec![random(r, &[2, 5, 2])],
            |t, v| Ok(t.slice(v[0], 1, 1, 3)?),
        ),
        (
            "gather",
            |r| vec![random(r, &[5])],
            |t, v| Ok(t.gather(v[0], vec![4, 0, 4, 2], vec![2, 2])?),
        ),
        (
            "select",
            |r| vec![random(r, &[5])],
            |t, v| Ok(t.select(v[0], vec![1, 1, 3])?),
        ),
        (
            "concat",
            |r| vec![random(r, &[2, 1, 3]), random(r, &[2, 2, 3])],
            |t, v| Ok(t.concat(&[v[0], v[1]], 1)?),
        ),
        (
            "conv2d_3x3",
            |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 2, 3, 3])],
            |t, v| Ok(t.conv2d_3x3(v[0], v[1])?),
        ),
        (
            "layer_norm",
            |r| vec![random(r, &[2, 4]), random(r, &[4]), random(r, &[4])],
            |t, v| Ok(t.layer_norm(v[0], v[1], v[2])?),
        ),
        (
            "attention",
            |r| vec![random(r, &[2, 3]), random(r, &[4, 3]), random(r, &[4, 2])],
            |t, v| Ok(scaled_dot_attention(t, v[0], v[1], v[2])?),
        ),
    ]
}

/// Each primitive on three random draws; reports the worst draw.
pub fn primitive_suite() -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for (name, gen, build) in primitive_cases() {
        let mut worst = GradCheckCase {
            name: format!("primitive/{name}"),
            max_rel_error: 0.0,
            elements: 0,
        };
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
            let params = gen(&mut rng);
            let case = run(name, &params, |tape, v| {
                let y = build(tape, v)?;
                weighted_sum(tape, y, seed)
            })?;
            worst.max_rel_error = worst.max_rel_error.max(case.max_rel_error);
            worst.elements += case.elements;
        }
        out.push(worst);
    }
    Ok(out)
}

pub fn block_suite(config: &ModelConfig) -> Result<Vec<GradCheckCase>> {
    let params = Parameters::init(config)?;
    let c = config.channels;
    let n = config.memory;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb10c);
    let mut out = Vec::new();

    let frame = random(&mut rng, &[3, 3, 3]);
    out.push(run_block(
        "block/backbone",
        &subset(&params, &["backbone."]),
        &[frame],
        |tape, p, v| {
            let f = backbone_frames(tape, p, &[v[0]])?;
            Ok(f[0])
        },
    )?);

    let x = random(&mut rng, &[2, 3, 2, c]);
    out.push(run_block(
        "block/axial",
        &subset(&params, &["block0.axial"]),
        &[x],
        |tape, p, v| axial_block(tape, p, "block0.axial", v[0]),
    )?);

    let x = random(&mut rng, &[2, 2, 3, c]);
    let lat = random(&mut rng, &[2, config.latent, c]);
    out.push(run_block(
        "block/latent",
        &subset(&params, &["block0.latent"]),
        &[x, lat],
        |tape, p, v| {
            let (px, lt) = latent_block(tape, p, "block0.latent", v[0], v[1])?;
            flatten(tape, &[px, lt])
        },
    )?);

    let xv = random(&mut rng, &[6, c]);
    let m = random(&mut rng, &[n, c]);
    out.push(run_block(
        "block/global",
        &subset(&params, &["block0.global"]),
        &[xv, m],
        |tape, p, v| {
            let (a, b) = global_block(tape, p, "block0.global", v[0], v[1])?;
            Ok(tape.concat(&[a, b], 0)?)
        },
    )?);

    let xv = random(&mut rng, &[6, c]);
    let m = random(&mut rng, &[n, c]);
    let heads = subset(
        &params,
        &["head.", "seg.", "class.", "decode.", "semantic."],
    );
    out.push(run_block("block/heads", &heads, &[xv, m], |tape, p, v| {
        let h = output_heads(tape, p, v[0], v[1])?;
        flatten(
            tape,
            &[h.class_probs, h.tube_probs, h.semantic_logits, h.decoded],
        )
    })?);

    if config.depth_enabled {
        let feats = Tensor::from_fn(vec![c, 3, 3], |_| rng.random_range(0.0..1.0))?;
        let d_max = config.d_max;
        out.push(run_block(
            "block/depth_head",
            &subset(&params, &["depth."]),
            &[feats],
            move |tape, p, v| {
                let d = depth_head(tape, p, &[v[0]], d_max)?;
                Ok(tape.scale(d, 1.0 / d_max))
            },
        )?);
    }
    Ok(out)
}

fn toy_annotation() -> TubeAnnotation {
    let tube = |id: u16, class: u16, thing: bool| Tube {
        tube_id: id,
        class_id: class,
        is_thing: thing,
        track_id: id as u32,
    };
    TubeAnnotation {
        frames: 1,
        height: 2,
        width: 3,
        label_map: vec![1, 1, 2, 3, 0, 3],
        tubes: vec![tube(1, 2, false), tube(2, 0, true), tube(3, 1, true)],
    }
}

pub fn loss_suite() -> Result<Vec<GradCheckCase>> {
    let ann = toy_annotation();
    let targets = ClipTargets::from_annotation(&ann);
    let layout = SlotLayout::new(4, vec![2])?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut out = Vec::new();

    let class_logits = random(&mut rng, &[4, 4]);
    let tube_logits = random(&mut rng, &[4, 6]);
    let factors = {
        let mut tape = Tape::new();
        let cl = tape.constant(class_logits.clone());
        let tl = tape.constant(tube_logits.clone());
        let cp = tape.softmax(cl, 1)?;
        let tp = tape.softmax(tl, 0)?;
        let (cp, tp) = (
            tape.value(cp).data().to_vec(),
            tape.value(tp).data().to_vec(),
        );
        let matching = match_predictions(&cp, &tp, &targets, &layout, 3)?;
        PqFactors::new(matching, &cp, &tp, &targets, 3)?
    };
    out.push(run(
        "loss/pq_pos",
        &[class_logits.clone(), tube_logits.clone()],
        |tape, v| {
            let tp = tape.softmax(v[1], 0)?;
            Ok(pq_style_loss(tape, v[0], tp, &targets, &factors)?.pos)
        },
    )?);
    out.push(run(
        "loss/pq_neg",
        &[class_logits, tube_logits.clone()],
        |tape, v| {
            let tp = tape.softmax(v[1], 0)?;
            let neg = pq_style_loss(tape, v[0], tp, &targets, &factors)?.neg;
            Ok(tape.scale(neg, NEG_WEIGHT))
        },
    )?);

    let matching: &Matching = &factors.matching;
    out.push(run("loss/tube_id_ce", &[tube_logits], |tape, v| {
        tube_id_cross_entropy(tape, v[0], &targets, matching)
    })?);

    let sem = random(&mut rng, &[6, 3]);
    out.push(run("loss/semantic", &[sem], |tape, v| {
        video_semantic_loss(tape, v[0], &targets.pixel_class)
    })?);

    let feats = random(&mut rng, &[6, 4]);
    out.push(run("loss/instance_disc", &[feats], |tape, v| {
        instance_discrimination_loss(tape, v[0], &targets, INSTANCE_TEMPERATURE, 3)
    })?);

    let gt = [2.0, 5.0, 10.0, 7.5];
    let pred = positive(&mut rng, &[4]);
    let pred = Tensor::from_fn(vec![4], |i| pred.data()[i] * 5.0)?;
    out.push(run("loss/depth", &[pred], |tape, v| {
        depth_loss(tape, v[0], &gt, &[true, true, false, true], SILOG_LAMBDA)
    })?);
    Ok(out)
}

/// The temporal term through two forwards, and the full model's outputs on
/// a 2×6×6 clip.
pub fn model_suite(config: &ModelConfig) -> Result<Vec<GradCheckCase>> {
    let params = Parameters::init(config)?;
    let mut out = Vec::new();

    let clip_a = random_clip(1, config.clip_len, 3, 3)?;
    let clip_b = random_clip(2, config.clip_len, 3, 3)?;
    let overlap = config.clip_len.saturating_sub(1).max(1);
    let no_depth = ModelConfig {
        depth_enabled: false,
        ..config.clone()
    };
    let temporal_params = Parameters::from_map(
        params
            .iter()
            .filter(|(n, _)| !n.starts_with("depth."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    );
    out.push(run_block(
        "loss/temporal",
        &temporal_params,
        &[],
        |tape, p, _| {
            let fa = forward(tape, p, &no_depth, &clip_a)?;
            let fb = forward(tape, p, &no_depth, &clip_b)?;
            clip_pair_temporal_loss(tape, &fa, &fb, overlap)
        },
    )?);

    let clip = random_clip(17, 2, 6, 6)?;
    let cfg = ModelConfig {
        clip_len: 2,
        ..config.clone()
    };
    out.push(run_block("model/full", &params, &[], |tape, p, _| {
        let f = forward(tape, p, &cfg, &clip)?;
        let mut parts = vec![f.tube_probs, f.class_probs, f.semantic_logits];
        if let Some(d) = f.depth {
            parts.push(tape.scale(d, 1.0 / cfg.d_max));
        }
        flatten(tape, &parts)
    })?);
    Ok(out)
}

/// Every check of the suite, in order: primitives, blocks, losses, model.
pub fn full_suite(config: &ModelConfig) -> Result<Vec<GradCheckCase>> {
    let mut out = primitive_suite()?;
    out.extend(block_suite(config)?);
    out.extend(loss_suite()?);
    out.extend(model_suite(config)?);
    Ok(out)
}

pub fn max_rel_error(cases: &[GradCheckCase]) -> f64 {
    cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}
