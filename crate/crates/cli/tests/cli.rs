use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tubeseg_core::config::RunConfig;
use tubeseg_core::data::{load_clip, ClassTable, VOID_TUBE};
use tubeseg_core::model::Parameters;

fn tubeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubeseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tubeseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn metrics(stdout: &str) -> BTreeMap<String, f64> {
    stdout
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen",
        "--out",
        s(dir),
        "--seed",
        seed,
        "--frames",
        "8",
        "--size",
        "16x16",
        "--things",
        "2",
    ]);
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "7");
    gen(&b, "7");
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    for name in [
        "classes.txt",
        "manifest.txt",
        "video.tseg",
        "clip_000.tseg",
        "clip_006.tseg",
    ] {
        assert!(ta.contains_key(Path::new(name)), "missing {name}");
    }
    let c = tmp.path().join("c");
    gen(&c, "8");
    assert_ne!(ta, tree(&c));
}

/// A checkpoint whose class head ignores its input and puts `p` on class 0.
fn constant_class_checkpoint(dir: &Path, table: &ClassTable, p: f64) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model.classes = table.len();
    cfg.model.stuff_count = table.stuff_classes().len();
    let mut params = Parameters::init(&cfg.model).unwrap();
    let d = table.len();
    let w2 = params.get_mut("class.w2").unwrap();
    w2.data_mut().fill(0.0);
    let rest = (1.0 - p) / d as f64;
    let probs: Vec<f64> = (0..=d).map(|i| if i == 0 { p } else { rest }).collect();
    let b2 = params.get_mut("class.b2").unwrap();
    for (b, q) in b2.data_mut().iter_mut().zip(probs) {
        *b = q.ln();
    }
    let path = dir.join(format!("const_{p}.tprm"));
    params.save(&path).unwrap();
    cfg.save(&path.with_extension("cfg")).unwrap();
    path
}

#[test]
fn threshold_voids_low_confidence_slots() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "3");
    let table = ClassTable::load(&data.join("classes.txt")).unwrap();
    let manifest = data.join("manifest.txt");
    for (p, expect_void) in [(0.69, true), (0.71, false)] {
        let ckpt = constant_class_checkpoint(tmp.path(), &table, p);
        let out = tmp.path().join(format!("pred_{p}"));
        ok(&[
            "infer",
            "--data",
            s(&manifest),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&out),
            "--threshold",
            "0.7",
        ]);
        let pred = load_clip(&out.join("pred_000.tseg")).unwrap();
        let all_void = pred.ann.label_map.iter().all(|&l| l == VOID_TUBE);
        let none_void = pred.ann.label_map.iter().all(|&l| l != VOID_TUBE);
        assert!(
            if expect_void { all_void } else { none_void },
            "confidence {p}"
        );
    }
}

#[test]
fn gradcheck_passes_on_the_builtin_config() {
    let stdout = ok(&["gradcheck"]);
    let last = stdout.lines().last().unwrap();
    let v: f64 = last
        .strip_prefix("max_rel_error=")
        .unwrap()
        .parse()
        .unwrap();
    assert!(v < 1e-4);
}

#[test]
fn usage_errors_exit_two_and_domain_errors_exit_one() {
    assert_eq!(
        tubeseg(&["gen", "--out", "x", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(tubeseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        tubeseg(&["eval", "--pred", "p.tseg", "--truth", "t.tseg", "--metric", "iou"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(tubeseg(&[]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.tseg");
    let out = tubeseg(&["eval", "--pred", s(&missing), "--truth", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "widht=3\n").unwrap();
    assert_eq!(
        tubeseg(&["--config", s(&cfg), "gradcheck"]).status.code(),
        Some(1)
    );
    assert_eq!(
        tubeseg(&["gen", "--out", s(tmp.path()), "--size", "2x2"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn ground_truth_passthrough_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "11");
    let manifest = data.join("manifest.txt");
    let pred = tmp.path().join("oracle");
    ok(&[
        "infer",
        "--data",
        s(&manifest),
        "--oracle",
        "--out",
        s(&pred),
    ]);
    let video = tmp.path().join("video.tseg");
    ok(&[
        "stitch",
        "--data",
        s(&pred.join("manifest.txt")),
        "--out",
        s(&video),
    ]);
    for metric in ["stq", "vpq", "dstq"] {
        for truth in [data.join("video.tseg"), manifest.clone()] {
            let m = metrics(&ok(&[
                "eval",
                "--pred",
                s(&video),
                "--truth",
                s(&truth),
                "--metric",
                metric,
            ]));
            assert!(m.contains_key(metric), "{metric}: {m:?}");
            assert!(m.values().all(|&v| v == 1.0), "{metric}: {m:?}");
        }
    }
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "5");
    let manifest = data.join("manifest.txt");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# short run\nlr=0.05\nw_depth=1\nsteps=10\ntemporal=true\nclip_paste=true\n",
    )
    .unwrap();
    let ckpt = tmp.path().join("model.tprm");
    let log = tmp.path().join("loss.tsv");
    ok(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&manifest),
        "--out",
        s(&ckpt),
        "--log",
        s(&log),
    ]);
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(
        log_text
            .lines()
            .filter(|l| l.split('\t').nth(1) == Some("total"))
            .count(),
        10
    );
    assert!(ckpt.with_extension("cfg").exists());

    let one = tmp.path().join("pred1");
    let three = tmp.path().join("pred3");
    ok(&[
        "infer",
        "--data",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&one),
    ]);
    ok(&[
        "infer",
        "--data",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&three),
        "--workers",
        "3",
    ]);
    assert_eq!(tree(&one), tree(&three));

    let masks = tmp.path().join("masks");
    ok(&[
        "infer",
        "--data",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&masks),
        "--per-mask",
    ]);
    assert!(masks.join("pred_000.tprp").exists());

    let video = tmp.path().join("video.tseg");
    ok(&[
        "stitch",
        "--data",
        s(&one.join("manifest.txt")),
        "--out",
        s(&video),
    ]);
    let truth = data.join("video.tseg");
    for metric in ["stq", "vpq", "dstq"] {
        let m = metrics(&ok(&[
            "eval",
            "--pred",
            s(&video),
            "--truth",
            s(&truth),
            "--metric",
            metric,
        ]));
        assert!(m.contains_key(metric));
        assert!(m.values().all(|v| (0.0..=1.0).contains(v)), "{m:?}");
    }
}
