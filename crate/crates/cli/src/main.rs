use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Video tube segmentation pipeline on synthetic moving-shape videos.
#[derive(Debug, Parser)]
#[command(name = "tubeseg", version)]
struct Cli {
    /// Run configuration (`key=value` lines). Unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Stq,
    Vpq,
    Dstq,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic video: classes.txt, clip_NNN.tseg, manifest.txt and video.tseg.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Frame size as HEIGHTxWIDTH.
        #[arg(long, default_value = "16x16", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 2)]
        things: usize,
        #[arg(long, default_value_t = 1)]
        stuff: usize,
        /// Clip length T; clips overlap by T-1 frames.
        #[arg(long, default_value_t = 2)]
        clip_len: usize,
    },
    /// Train on the video behind a manifest. Writes the checkpoint and, next
    /// to it, the effective config with extension .cfg. D, stuff_count and T
    /// are taken from the dataset.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config's `steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides the config's `lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-clip predictions: pred_NNN.tseg, classes.txt and manifest.txt in
    /// --out; per-mask mode adds pred_NNN.tprp proposal records.
    Infer {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint; its config is read from --config or the .cfg beside it.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_mask: bool,
        /// Slots whose best class probability is below this are voided.
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        /// Per-mask binarization threshold on the tube probability.
        #[arg(long, default_value_t = 0.4)]
        mask_threshold: f64,
        /// Threads over clips; output does not depend on it.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        workers: u16,
        /// Pass the ground-truth annotations through instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Stitch per-clip predictions listed in a manifest into one video TSEG.
    Stitch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a video prediction against the truth (a video TSEG or a manifest).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Stq)]
        metric: Metric,
        /// VPQ window sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        windows: Vec<usize>,
        /// Depth inlier ratio threshold for DSTQ.
        #[arg(long, default_value_t = 1.25)]
        dq_threshold: f64,
    },
    /// Finite-difference check of every primitive, block, loss and the full
    /// model; fails when the max relative error reaches 1e-4. Uses the model
    /// part of --config, else a small built-in configuration.
    Gradcheck,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("bad dimension {v:?}"))
    };
    Ok((dim(h)?, dim(w)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
