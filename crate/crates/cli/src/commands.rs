use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use tubeseg_core::config::RunConfig;
use tubeseg_core::data::{
    generate_synthetic_sequence, load_clip, manifest_dir, save_clip, ClassTable, DatasetManifest,
    LabeledClip,
};
use tubeseg_core::gradcheck::{full_suite, max_rel_error, toy_config};
use tubeseg_core::inference::{
    assemble_ground_truth, assign_per_mask, assign_per_pixel, save_proposals, stitch_clips,
    ClipResult, VideoResult,
};
use tubeseg_core::metrics::{evaluate_video, EvalOptions};
use tubeseg_core::model::{init_memory, Model, Parameters};
use tubeseg_core::trainer::Trainer;
use tubeseg_core::{Error, Result};

use crate::{Cli, Command, Metric};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gen {
            out,
            seed,
            frames,
            size: (h, w),
            things,
            stuff,
            clip_len,
        } => gen(&out, seed, frames, h, w, things, stuff, clip_len),
        Command::Train {
            data,
            out,
            log,
            steps,
            lr,
            seed,
        } => train(config, &data, &out, log.as_deref(), steps, lr, seed),
        Command::Infer {
            data,
            checkpoint,
            out,
            per_mask,
            threshold,
            mask_threshold,
            workers,
            oracle,
        } => {
            let model = if oracle {
                None
            } else {
                let ckpt =
                    checkpoint.ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
                Some(load_model(config, &ckpt)?)
            };
            let mode = Mode {
                per_mask,
                threshold,
                mask_threshold,
            };
            infer(&data, model.as_ref(), &out, mode, workers as usize)
        }
        Command::Stitch { data, out } => stitch(&data, &out),
        Command::Eval {
            pred,
            truth,
            metric,
            windows,
            dq_threshold,
        } => eval(&pred, &truth, metric, windows, dq_threshold),
        Command::Gradcheck => gradcheck(config),
    }
}

fn clip_name(i: usize) -> PathBuf {
    format!("clip_{i:03}.tseg").into()
}

#[allow(clippy::too_many_arguments)]
fn gen(
    out: &Path,
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
    things: usize,
    stuff: usize,
    clip_len: usize,
) -> Result<()> {
    let (clips, video) = generate_synthetic_sequence(seed, frames, h, w, things, stuff, clip_len)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    video.table.save(&out.join("classes.txt"))?;
    let mut names = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        save_clip(&c.clip, &c.ann, &out.join(clip_name(i)))?;
        names.push(clip_name(i));
    }
    let manifest = DatasetManifest {
        clip_len,
        overlap: clip_len - 1,
        classes: "classes.txt".into(),
        clips: names,
    };
    manifest.save(&out.join("manifest.txt"))?;
    save_clip(&video.video.clip, &video.video.ann, &out.join("video.tseg"))?;
    println!(
        "wrote {} clips of {clip_len} frames to {}",
        clips.len(),
        out.display()
    );
    Ok(())
}

struct Dataset {
    manifest: DatasetManifest,
    table: ClassTable,
    clips: Vec<LabeledClip>,
    starts: Vec<usize>,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(path)?;
    let (table, clips) = manifest.load_all(manifest_dir(path))?;
    let starts = (0..clips.len()).map(|i| manifest.start_frame(i)).collect();
    Ok(Dataset {
        manifest,
        table,
        clips,
        starts,
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    log: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut cfg = load_config(config)?;
    cfg.model.classes = ds.table.len();
    cfg.model.stuff_count = ds.table.stuff_classes().len();
    cfg.model.clip_len = ds.manifest.clip_len;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(v) = lr {
        cfg.train.lr = v;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    let video = assemble_ground_truth(&ds.clips, &ds.starts)?;
    let steps = cfg.train.steps;
    let mut trainer = Trainer::new(cfg.clone(), ds.table, vec![video])?;
    match log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
            trainer.run(steps, &mut w)?;
            w.flush().map_err(io_err(p))?;
        }
        None => {
            trainer.run(steps, &mut io::stdout().lock())?;
        }
    }
    trainer.params.save(out)?;
    cfg.save(&out.with_extension("cfg"))?;
    Ok(())
}

fn load_model(config: Option<&Path>, checkpoint: &Path) -> Result<Model> {
    let cfg_path = config.map_or_else(|| checkpoint.with_extension("cfg"), Path::to_path_buf);
    let cfg = RunConfig::load(&cfg_path)?;
    let params = Parameters::load_for(checkpoint, &cfg.model)?;
    Model::new(cfg.model, params)
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    per_mask: bool,
    threshold: f64,
    mask_threshold: f64,
}

fn predict_clip(
    model: Option<&Model>,
    table: &ClassTable,
    clip: &LabeledClip,
    start: usize,
    mode: Mode,
) -> Result<ClipResult> {
    let Some(m) = model else {
        return Ok(ClipResult::from_ground_truth(start, clip));
    };
    let layout = init_memory(&m.config, table)?;
    let pred = m.predict(&clip.clip)?;
    if mode.per_mask {
        assign_per_mask(&pred, &layout, table, mode.mask_threshold, start)
    } else {
        assign_per_pixel(&pred, &layout, table, mode.threshold, start)
    }
}

fn infer(data: &Path, model: Option<&Model>, out: &Path, mode: Mode, workers: usize) -> Result<()> {
    let ds = load_dataset(data)?;
    let n = ds.clips.len();
    let mut results: Vec<Option<Result<ClipResult>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers.min(n))
            .map(|w| {
                let ds = &ds;
                s.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| {
                            (
                                i,
                                predict_clip(model, &ds.table, &ds.clips[i], ds.starts[i], mode),
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("inference worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    fs::create_dir_all(out).map_err(io_err(out))?;
    ds.table.save(&out.join("classes.txt"))?;
    let mut names = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let r = r.expect("every clip predicted")?;
        let d_max = model.map_or(ds.clips[i].clip.d_max(), |m| m.config.d_max);
        let lc = r.to_labeled_clip(d_max)?;
        let name = PathBuf::from(format!("pred_{i:03}.tseg"));
        save_clip(&lc.clip, &lc.ann, &out.join(&name))?;
        if mode.per_mask && model.is_some() {
            save_proposals(
                &out.join(name.with_extension("tprp")),
                &r.proposals,
                r.ann.pixel_count(),
            )?;
        }
        names.push(name);
    }
    let manifest = DatasetManifest {
        classes: "classes.txt".into(),
        clips: names,
        ..ds.manifest
    };
    manifest.save(&out.join("manifest.txt"))?;
    println!("wrote {n} clip predictions to {}", out.display());
    Ok(())
}

fn stitch(data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let results: Vec<ClipResult> = ds
        .clips
        .iter()
        .zip(&ds.starts)
        .map(|(c, &s)| ClipResult::from_ground_truth(s, c))
        .collect();
    let video = stitch_clips(&results)?;
    let d_max = ds.clips[0].clip.d_max();
    let lc = video.to_labeled_clip(d_max)?;
    save_clip(&lc.clip, &lc.ann, out)?;
    println!(
        "stitched {} clips into {} frames with {} tracks",
        results.len(),
        video.frames(),
        video.ann.tubes.len()
    );
    Ok(())
}

fn load_truth(path: &Path) -> Result<LabeledClip> {
    if path.extension().is_some_and(|e| e == "tseg") {
        load_clip(path)
    } else {
        let ds = load_dataset(path)?;
        assemble_ground_truth(&ds.clips, &ds.starts)
    }
}

fn eval(
    pred: &Path,
    truth: &Path,
    metric: Metric,
    windows: Vec<usize>,
    dq_threshold: f64,
) -> Result<()> {
    let video = VideoResult::from_labeled_clip(&load_clip(pred)?);
    let truth = load_truth(truth)?;
    let options = EvalOptions {
        vpq_windows: (metric == Metric::Vpq).then_some(windows),
        dq_threshold: (metric == Metric::Dstq).then_some(dq_threshold),
    };
    let report = evaluate_video(&video, &truth, &options)?;
    let keep = |k: &str| match metric {
        Metric::Stq => true,
        Metric::Vpq => k.starts_with("vpq"),
        Metric::Dstq => true,
    };
    for (k, v) in report.entries() {
        if keep(&k) {
            println!("{k}={v}");
        }
    }
    Ok(())
}

fn gradcheck(config: Option<&Path>) -> Result<()> {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => toy_config(),
    };
    let cases = full_suite(&model)?;
    for c in &cases {
        println!("{}\t{:.3e}\t{}", c.name, c.max_rel_error, c.elements);
    }
    let worst = max_rel_error(&cases);
    println!("max_rel_error={worst:.3e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "max relative gradient error {worst:.3e} is not below {GRADCHECK_TOLERANCE:e}"
        )))
    }
}
