//! End-to-end acceptance checks, one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeseg_autodiff::{Tape, Tensor};
use tubeseg_core::augment::{clip_paste, PasteSpec};
use tubeseg_core::config::RunConfig;
use tubeseg_core::data::{
    generate_synthetic_video, validate_annotation, ClassTable, LabeledClip, Scene, SceneObject,
    Shape, TubeAnnotation, VideoClip, VOID_TUBE,
};
use tubeseg_core::gradcheck::{full_suite, max_rel_error, toy_config};
use tubeseg_core::inference::{assign_per_pixel, stitch_clips, ClipResult};
use tubeseg_core::losses::{
    clip_pair_temporal_loss, depth_loss, hungarian_match, temporal_consistency_loss, LossReport,
    LossWeights,
};
use tubeseg_core::metrics::{compute_aq, stq_from_components, EvalOptions};
use tubeseg_core::model::{forward, Model, ModelConfig, Parameters, SlotLayout, TubePrediction};
use tubeseg_core::trainer::{evaluate, Predictor, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stq_identity() -> Outcome {
    let stq = stq_from_components(0.768, 0.638);
    check(
        (stq - 0.700).abs() <= 0.001,
        format!("sqrt(0.768·0.638) = {stq:.6}"),
    )
}

fn gradient_suite() -> Outcome {
    let cases = full_suite(&toy_config()).map_err(|e| e.to_string())?;
    let worst = max_rel_error(&cases);
    let name = cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map_or("", |c| c.name.as_str());
    check(
        worst < 1e-4,
        format!("{} cases, max rel error {worst:.3e} ({name})", cases.len()),
    )
}

fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoClip {
    let rgb = (0..t * h * w * 3).map(|_| rng.random::<u8>()).collect();
    VideoClip::new(t, h, w, rgb, None, 80.0).expect("valid clip")
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let cfg = ModelConfig {
            channels: 4,
            memory: rng.random_range(2..=6),
            latent: 2,
            num_blocks: 1,
            classes: 3,
            stuff_count: 1,
            clip_len: 2,
            seed: i,
            init_std: 0.5,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg).map_err(|e| e.to_string())?;
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let pred = model
            .predict(&random_clip(&mut rng, 2, h, w))
            .map_err(|e| e.to_string())?;
        for px in 0..pred.pixels() {
            let s: f64 = (0..pred.memory).map(|m| pred.tube_prob(m, px)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    check(worst <= 1e-9, format!("max |Σ m̂ − 1| = {worst:.3e}"))
}

fn brute_force_best(sim: &[Vec<f64>]) -> f64 {
    fn rec(sim: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64) -> f64 {
        if row == sim.len() {
            return acc;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(rec(sim, row + 1, used, acc + sim[row][j]));
                used[j] = false;
            }
        }
        best
    }
    rec(sim, 0, &mut vec![false; sim[0].len()], 0.0)
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..500 {
        let n = rng.random_range(1..=7);
        let k = rng.random_range(1..=n);
        let sim: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a = hungarian_match(&sim).map_err(|e| e.to_string())?;
        let total = a.iter().enumerate().fold(0.0, |s, (i, &j)| s + sim[i][j]);
        let best = brute_force_best(&sim);
        if total != best || a.iter().collect::<BTreeSet<_>>().len() != k {
            return Err(format!(
                "trial {trial}: hungarian {total} vs brute force {best}"
            ));
        }
    }
    for n in 1..=7 {
        for k in 1..=n {
            let a = hungarian_match(&vec![vec![0.5; n]; k]).map_err(|e| e.to_string())?;
            if a != (0..k).collect::<Vec<_>>() {
                return Err(format!("all-equal {k}×{n} matched as {a:?}"));
            }
        }
    }
    Ok("500 random matrices exact, all-equal ties resolve to the identity".into())
}

fn overfit() -> Outcome {
    let video = generate_synthetic_video(7, 2, 16, 16, 2, 1).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.model.classes = video.table.len();
    cfg.model.stuff_count = video.table.stuff_classes().len();
    cfg.model.clip_len = 2;
    cfg.train.lr = 0.05;
    cfg.train.weights.depth = 1.0;
    let mut trainer = Trainer::new(cfg, video.table.clone(), vec![video.video.clone()])
        .map_err(|e| e.to_string())?;
    let options = EvalOptions {
        vpq_windows: Some(vec![1]),
        dq_threshold: None,
    };
    let mut last = (0.0, 0.0);
    while trainer.step < 2000 {
        trainer
            .run(100, &mut std::io::sink())
            .map_err(|e| e.to_string())?;
        let model = trainer.model();
        let clips = [video.video.clone()];
        let (_, report) = evaluate(
            Predictor::Model(&model),
            &clips,
            &[0],
            &video.video,
            &video.table,
            &options,
        )
        .map_err(|e| e.to_string())?;
        last = (report.stq, report.vpq.map_or(0.0, |v| v.vpq));
        if last.0 >= 0.9 && last.1 >= 0.9 {
            break;
        }
    }
    check(
        last.0 >= 0.9 && last.1 >= 0.9,
        format!(
            "after {} steps STQ {:.4}, VPQ(k=1) {:.4}",
            trainer.step, last.0, last.1
        ),
    )
}

fn moving_rectangle() -> LabeledClip {
    let table = ClassTable::from_names([("car", true), ("road", false)]).expect("valid table");
    let scene = Scene {
        frames: 8,
        height: 16,
        width: 16,
        table,
        stuff_colors: vec![[40, 40, 40]],
        stuff_depths: vec![50.0],
        objects: vec![SceneObject {
            shape: Shape::Rect,
            class_id: 0,
            top: 5,
            left: 1,
            height: 4,
            width: 4,
            vy: 0,
            vx: 1,
            depth: 10.0,
            color: [220, 30, 30],
        }],
    };
    scene.render().expect("scene fits").video
}

/// Association quality straight from its definition, on explicit pixel sets.
fn aq_direct(pred: &TubeAnnotation, gt: &TubeAnnotation) -> f64 {
    let thing_track = |a: &TubeAnnotation, id: u16| {
        a.tubes
            .iter()
            .find(|t| t.tube_id == id && t.is_thing && id != VOID_TUBE)
            .map(|t| t.track_id)
    };
    let n = gt.label_map.len();
    let gt_of: Vec<Option<u32>> = (0..n).map(|i| thing_track(gt, gt.label_map[i])).collect();
    let labeled: Vec<bool> = gt.label_map.iter().map(|&l| l != VOID_TUBE).collect();
    let pred_of: Vec<Option<u32>> = (0..n)
        .map(|i| {
            if labeled[i] {
                thing_track(pred, pred.label_map[i])
            } else {
                None
            }
        })
        .collect();
    let gt_tracks: BTreeSet<u32> = gt_of.iter().flatten().copied().collect();
    let pred_tracks: BTreeSet<u32> = pred_of.iter().flatten().copied().collect();
    let mut sum = 0.0;
    for g in &gt_tracks {
        let gs: BTreeSet<usize> = (0..n).filter(|&i| gt_of[i] == Some(*g)).collect();
        let mut inner = 0.0;
        for p in &pred_tracks {
            let ps: BTreeSet<usize> = (0..n).filter(|&i| pred_of[i] == Some(*p)).collect();
            let tpa = gs.intersection(&ps).count() as f64;
            inner += tpa * tpa / gs.union(&ps).count() as f64;
        }
        sum += inner / gs.len() as f64;
    }
    sum / gt_tracks.len() as f64
}

fn stitching_oracle() -> Outcome {
    let video = moving_rectangle();
    let results: Vec<ClipResult> = (0..7)
        .map(|s| ClipResult::from_ground_truth(s, &video.slice_frames(s, 2).expect("in range")))
        .collect();
    let stitched = stitch_clips(&results).map_err(|e| e.to_string())?;
    let aq = compute_aq(&stitched.ann, &video.ann).map_err(|e| e.to_string())?;
    if aq != 1.0 {
        return Err(format!("ground-truth passthrough AQ {aq}"));
    }
    // Hide the car on the overlap frame of the clip covering frames 3–4,
    // so the car re-enters at frame 4 under a fresh track.
    let mut broken = results.clone();
    let hw = 16 * 16;
    let car = broken[3]
        .ann
        .tubes
        .iter()
        .find(|t| t.is_thing)
        .expect("car present")
        .tube_id;
    for l in &mut broken[3].ann.label_map[..hw] {
        if *l == car {
            *l = VOID_TUBE;
        }
    }
    let stitched = stitch_clips(&broken).map_err(|e| e.to_string())?;
    let tracks: BTreeSet<u32> = stitched
        .ann
        .tubes
        .iter()
        .filter(|t| t.is_thing)
        .map(|t| t.track_id)
        .collect();
    let aq = compute_aq(&stitched.ann, &video.ann).map_err(|e| e.to_string())?;
    let oracle = aq_direct(&stitched.ann, &video.ann);
    check(
        tracks.len() == 2 && (aq - oracle).abs() <= 1e-9 && (oracle - 0.5).abs() <= 1e-12,
        format!("passthrough AQ 1, broken AQ {aq} vs direct {oracle}"),
    )
}

fn temporal_contract() -> Outcome {
    let cfg = toy_config();
    let params = Parameters::init(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frame = random_clip(&mut rng, 1, 5, 5);
    let rgb = frame.rgb().repeat(2);
    let clip = VideoClip::new(2, 5, 5, rgb, None, 80.0).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let a = forward(&mut tape, &bound, &cfg, &clip).map_err(|e| e.to_string())?;
    let b = forward(&mut tape, &bound, &cfg, &clip).map_err(|e| e.to_string())?;
    let dup = clip_pair_temporal_loss(&mut tape, &a, &b, 1).map_err(|e| e.to_string())?;
    let dup = tape.value(dup).data()[0];

    let x = Tensor::from_fn(vec![4, 9], |_| rng.random_range(-2.0..2.0)).expect("shape");
    let offset = 0.73;
    let y = Tensor::from_fn(vec![4, 9], |i| x.data()[i] + offset).expect("shape");
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let l = temporal_consistency_loss(&mut tape, xv, yv).map_err(|e| e.to_string())?;
    let shifted = tape.value(l).data()[0];
    check(
        dup == 0.0 && (shifted - offset).abs() <= 1e-12,
        format!("duplicated pair {dup}, offset {offset} gives {shifted}"),
    )
}

fn paste_validity() -> Outcome {
    let mut applied = 0;
    let mut seed = 0u64;
    while applied < 200 {
        let src = generate_synthetic_video(2 * seed, 3, 12, 12, 3, 2).map_err(|e| e.to_string())?;
        let dst =
            generate_synthetic_video(2 * seed + 1, 3, 12, 12, 3, 2).map_err(|e| e.to_string())?;
        let spec = PasteSpec::draw(&src.video, &dst.video, &src.table, seed);
        seed += 1;
        if !spec.apply {
            continue;
        }
        applied += 1;
        let out = clip_paste(&spec).map_err(|e| e.to_string())?;
        let violations = validate_annotation(&out.ann, &src.table);
        if !violations.is_empty() {
            return Err(format!("paste seed {}: {violations:?}", seed - 1));
        }
        let support: Vec<bool> = src
            .video
            .ann
            .label_map
            .iter()
            .map(|id| spec.selected.contains(id))
            .collect();
        let kept = dst
            .video
            .ann
            .label_map
            .iter()
            .zip(&support)
            .filter(|(&l, &s)| l != VOID_TUBE && !s)
            .count();
        let expected = kept + support.iter().filter(|&&s| s).count();
        if out.ann.labeled_pixels() != expected {
            return Err(format!(
                "paste seed {}: {} labeled pixels, expected {expected}",
                seed - 1,
                out.ann.labeled_pixels()
            ));
        }
    }
    Ok(format!(
        "{applied} pastes valid and conserving ({seed} draws)"
    ))
}

fn threshold_semantics() -> Outcome {
    let table = ClassTable::from_names([("car", true), ("road", false)]).expect("valid table");
    let layout = SlotLayout::new(3, vec![1]).map_err(|e| e.to_string())?;
    let pred = TubePrediction {
        frames: 1,
        height: 1,
        width: 2,
        memory: 3,
        classes: 2,
        class_probs: vec![0.69, 0.0, 0.31, 0.71, 0.0, 0.29, 0.0, 0.0, 1.0],
        tube_probs: vec![0.6, 0.1, 0.3, 0.8, 0.1, 0.1],
        tube_logits: Vec::new(),
        semantic_logits: Vec::new(),
        depth: None,
    };
    let r = assign_per_pixel(&pred, &layout, &table, 0.7, 0).map_err(|e| e.to_string())?;
    let slots: Vec<u16> = r.ann.tubes.iter().map(|t| t.tube_id).collect();
    check(
        slots == vec![2] && r.ann.label_map == vec![2, 2],
        format!("surviving slot ids {slots:?}, map {:?}", r.ann.label_map),
    )
}

fn depth_contracts() -> Outcome {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let clip = random_clip(&mut rng, 2, 4, 4);
    let mut params = Parameters::init(&cfg).map_err(|e| e.to_string())?;
    let mut range_ok = true;
    for bias in [-1e4, -30.0, 0.0, 30.0, 1e4] {
        params.insert(
            "depth.conv2.bias",
            Tensor::new(vec![1], vec![bias]).expect("shape"),
        );
        let model = Model::new(cfg.clone(), params.clone()).map_err(|e| e.to_string())?;
        let depth = model
            .predict(&clip)
            .map_err(|e| e.to_string())?
            .depth
            .unwrap_or_default();
        range_ok &= !depth.is_empty() && depth.iter().all(|&d| d > 0.0 && d < cfg.d_max);
    }
    let gt: Vec<f64> = (0..12).map(|i| 0.5 + i as f64 * 3.7).collect();
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::new(vec![12], gt.clone()).expect("shape"));
    let l = depth_loss(&mut tape, pred, &gt, &[true; 12], 0.85).map_err(|e| e.to_string())?;
    let zero = tape.value(l).data()[0];
    let weighted = LossReport::from_components(&[("depth", 0.5)], &LossWeights::default())
        .map_err(|e| e.to_string())?
        .total;
    check(
        range_ok && zero == 0.0 && weighted == 50.0,
        format!("range ok {range_ok}, loss at truth {zero}, 0.5 weighted to {weighted}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("stq identity", stq_identity),
        ("gradient suite", gradient_suite),
        ("tube normalization", normalization),
        ("matching oracle", matching_oracle),
        ("overfit experiment", overfit),
        ("stitching oracle", stitching_oracle),
        ("temporal contract", temporal_contract),
        ("clip-paste validity", paste_validity),
        ("threshold semantics", threshold_semantics),
        ("depth contracts", depth_contracts),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed: Duration = start.elapsed();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {:>2} {name}: {detail} [{:.2}s]",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
