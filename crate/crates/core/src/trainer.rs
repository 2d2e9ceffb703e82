//! Deterministic plain-SGD training and end-to-end evaluation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeseg_autodiff::{Tape, Var};

use crate::augment::{clip_paste, PasteSpec};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{ClassTable, LabeledClip};
use crate::error::{Error, Result};
use crate::inference::{
    assign_per_pixel, stitch_clips, ClipResult, VideoResult, DEFAULT_THRESHOLD,
};
use crate::losses::{
    clip_loss_terms, clip_pair_temporal_loss, match_predictions, ClipTargets, LossInputs,
    LossReport, LossTerms, PqFactors, TEMPORAL,
};
use crate::metrics::{evaluate_video, EvalOptions, MetricReport};
use crate::model::{forward, init_memory, ClipForward, Model, ModelConfig, Parameters, SlotLayout};

/// One batch item: a clip, or two clips sharing `T − 1` frames.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainSample {
    Single(LabeledClip),
    Pair(LabeledClip, LabeledClip),
}

impl TrainSample {
    fn clips(&self) -> Vec<&LabeledClip> {
        match self {
            Self::Single(c) => vec![c],
            Self::Pair(a, b) => vec![a, b],
        }
    }
}

/// Stream of a step's random draws, fixed by `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn clip_loss(
    tape: &mut Tape,
    f: &ClipForward,
    clip: &LabeledClip,
    layout: &SlotLayout,
    config: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<LossTerms> {
    let targets = ClipTargets::from_annotation(&clip.ann);
    let class_probs = tape.value(f.class_probs).data().to_vec();
    let tube_probs = tape.value(f.tube_probs).data().to_vec();
    let matching = match_predictions(&class_probs, &tube_probs, &targets, layout, config.classes)?;
    let factors = PqFactors::new(
        matching,
        &class_probs,
        &tube_probs,
        &targets,
        config.classes,
    )?;
    let inputs = LossInputs {
        targets: &targets,
        factors: &factors,
        depth: clip.clip.depth().filter(|_| config.depth_enabled),
        seed,
    };
    clip_loss_terms(tape, f, inputs, &train.weights)
}

fn push_scaled(tape: &mut Tape, into: &mut LossTerms, terms: LossTerms, scale: f64) {
    for (name, v) in terms.terms {
        let s = tape.scale(v, scale);
        into.push(name, s);
    }
}

/// Builds the batch loss on `tape`: per-clip components averaged over all
/// clips, the temporal term averaged over pairs.
pub fn batch_loss(
    tape: &mut Tape,
    params: &Parameters,
    batch: &[TrainSample],
    layout: &SlotLayout,
    config: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Var, LossReport, crate::model::Bound)> {
    let bound = params.bind(tape, true);
    let clip_count: usize = batch.iter().map(|s| s.clips().len()).sum();
    let pair_count = batch
        .iter()
        .filter(|s| matches!(s, TrainSample::Pair(..)))
        .count();
    let mut terms = LossTerms::default();
    for (i, sample) in batch.iter().enumerate() {
        let mut fwd = Vec::new();
        for (j, clip) in sample.clips().into_iter().enumerate() {
            let f = forward(tape, &bound, config, &clip.clip)?;
            let item_seed = seed ^ ((i as u64) << 32 | j as u64);
            let t = clip_loss(tape, &f, clip, layout, config, train, item_seed)?;
            push_scaled(tape, &mut terms, t, 1.0 / clip_count as f64);
            fwd.push(f);
        }
        if let [a, b] = fwd[..] {
            if train.weights.temporal > 0.0 {
                let overlap = a.frames - 1;
                let v = clip_pair_temporal_loss(tape, &a, &b, overlap)?;
                let v = tape.scale(v, 1.0 / pair_count as f64);
                terms.push(TEMPORAL, v);
            }
        }
    }
    let (total, report) = terms.aggregate(tape, &train.weights)?;
    Ok((total, report, bound))
}

/// Forward, loss, backward and `θ ← θ − lr·∇θ` for one batch.
pub fn train_step(
    params: &mut Parameters,
    batch: &[TrainSample],
    layout: &SlotLayout,
    config: &ModelConfig,
    train: &TrainConfig,
    step: usize,
    seed: u64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let (total, report, bound) = batch_loss(&mut tape, params, batch, layout, config, train, seed)?;
    if let Some((component, value)) = report.first_non_finite() {
        return Err(Error::NonFiniteLoss {
            component,
            step,
            value,
        });
    }
    let grads = tape.backward(total)?;
    let grads = bound.gradients(&tape, &grads)?;
    params.sgd_step(&grads, train.lr)?;
    Ok(report)
}

/// Training state over a fixed set of annotated videos.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub table: ClassTable,
    pub layout: SlotLayout,
    pub params: Parameters,
    pub videos: Vec<LabeledClip>,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, table: ClassTable, videos: Vec<LabeledClip>) -> Result<Self> {
        config.validate()?;
        let layout = init_memory(&config.model, &table)?;
        let params = Parameters::init(&config.model)?;
        Self::with_params(config, table, videos, layout, params)
    }

    pub fn with_params(
        config: RunConfig,
        table: ClassTable,
        videos: Vec<LabeledClip>,
        layout: SlotLayout,
        params: Parameters,
    ) -> Result<Self> {
        params.check_config(&config.model)?;
        let window = window_len(&config);
        if videos.is_empty() {
            return Err(Error::Config("no training videos".into()));
        }
        if let Some(v) = videos.iter().find(|v| v.clip.frames() < window) {
            return Err(Error::Config(format!(
                "a training video has {} frames but a training window needs {window}",
                v.clip.frames()
            )));
        }
        Ok(Self {
            config,
            table,
            layout,
            params,
            videos,
            step: 0,
        })
    }

    /// Batch of the current step: random windows of random videos, each
    /// optionally clip-pasted with the next item's window as source.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
        let window = window_len(&self.config);
        let t = self.config.model.clip_len;
        let windows = (0..self.config.train.batch)
            .map(|_| {
                let v = &self.videos[rng.random_range(0..self.videos.len())];
                let start = rng.random_range(0..=v.clip.frames() - window);
                v.slice_frames(start, window)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = windows.len();
        let mut samples = Vec::with_capacity(b);
        for i in 0..b {
            let mut target = windows[i].clone();
            if self.config.train.clip_paste {
                let spec = PasteSpec::draw(
                    &windows[(i + 1) % b],
                    &windows[i],
                    &self.table,
                    rng.random(),
                );
                let pasted = clip_paste(&spec)?;
                let things = pasted
                    .ann
                    .present_tubes()
                    .iter()
                    .filter(|t| t.is_thing)
                    .count();
                if things <= self.layout.thing_slots().len() {
                    target = pasted;
                }
            }
            samples.push(if window > t {
                TrainSample::Pair(target.slice_frames(0, t)?, target.slice_frames(1, t)?)
            } else {
                TrainSample::Single(target)
            });
        }
        Ok(samples)
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let mut rng = step_rng(self.config.model.seed, self.step);
        let batch = self.sample_batch(&mut rng)?;
        let seed = rng.random();
        let report = train_step(
            &mut self.params,
            &batch,
            &self.layout,
            &self.config.model,
            &self.config.train,
            self.step,
            seed,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` steps, writing `step<TAB>component<TAB>value` lines.
    pub fn run(&mut self, steps: usize, log: &mut dyn Write) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.step;
            let report = self.train_step()?;
            write_loss_log(log, step, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }
}

fn window_len(config: &RunConfig) -> usize {
    config.model.clip_len + usize::from(config.train.temporal)
}

pub fn write_loss_log(log: &mut dyn Write, step: usize, report: &LossReport) -> Result<()> {
    let io = |e| Error::Io {
        path: "loss log".into(),
        source: e,
    };
    for (name, value) in &report.components {
        writeln!(log, "{step}\t{name}\t{value}").map_err(io)?;
    }
    writeln!(log, "{step}\ttotal\t{}", report.total).map_err(io)?;
    Ok(())
}

/// Source of clip-level results for evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Ground-truth annotations passed through unchanged.
    GroundTruth,
}

/// Per-pixel inference on each clip, stitched into a video result.
pub fn predict_video(
    predictor: Predictor<'_>,
    clips: &[LabeledClip],
    starts: &[usize],
    table: &ClassTable,
    threshold: f64,
) -> Result<VideoResult> {
    if clips.len() != starts.len() {
        return Err(Error::Contract("need one start frame per clip".into()));
    }
    let results = clips
        .iter()
        .zip(starts)
        .map(|(c, &s)| match predictor {
            Predictor::GroundTruth => Ok(ClipResult::from_ground_truth(s, c)),
            Predictor::Model(m) => {
                let layout = init_memory(&m.config, table)?;
                let pred = m.predict(&c.clip)?;
                assign_per_pixel(&pred, &layout, table, threshold, s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_clips(&results)
}

/// Inference, stitching and metrics against the whole-video ground truth.
pub fn evaluate(
    predictor: Predictor<'_>,
    clips: &[LabeledClip],
    starts: &[usize],
    truth: &LabeledClip,
    table: &ClassTable,
    options: &EvalOptions,
) -> Result<(VideoResult, MetricReport)> {
    let video = predict_video(predictor, clips, starts, table, DEFAULT_THRESHOLD)?;
    let report = evaluate_video(&video, truth, options)?;
    Ok((video, report))
}
