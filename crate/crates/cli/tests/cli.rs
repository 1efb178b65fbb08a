use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use msf::{LatentGrid, ResidualPyramid};

fn msf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = msf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "[dataset]
classes = 2
samples_per_class = 4
height = 8
width = 8
[model]
schedule = 4x4,8x8
hidden = 16
depth = 1
heads = 2
[train]
stage0_steps = 2
stage1_steps = 2
batch = 4,4
deterministic = true
[sample]
per_class = 2
steps = 2,2
compare_steps = none
reference_per_class = 3
";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn factorize_then_reconstruct_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = LatentGrid::from_fn(16, 16, 2, |r, c, ch| (r as f32 * 0.1 - c as f32 * 0.05) * (ch + 1) as f32).unwrap();
    let (src, pyr, rec) = (dir.path().join("x.lgrid"), dir.path().join("x.msfp"), dir.path().join("y.lgrid"));
    img.save(&src).unwrap();
    ok(&["factorize", "--in", p(&src), "--scales", "4x4,8x8,16x16", "--codec", "identity", "--out", p(&pyr)]);
    assert_eq!(ResidualPyramid::load(&pyr).unwrap().residuals().len(), 3);
    ok(&["reconstruct", "--in", p(&pyr), "--out", p(&rec)]);
    assert!(LatentGrid::load(&rec).unwrap().relative_error(&img) < 1e-6);
}

#[test]
fn cost_prints_the_speedup() {
    let out = ok(&["cost"]);
    let ratio: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("ratio = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((3.8..=5.0).contains(&ratio), "{out}");
    assert!(!msf(&["cost", "--stages", "144:0"]).status.success());
}

#[test]
fn train_sample_eval_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();

    // stage 1 without a checkpoint is refused
    assert!(!msf(&["train", "--config", p(&cfg), "--stage", "1", "--out", p(&d.join("t"))]).status.success());
    ok(&["train", "--config", p(&cfg), "--stage", "0", "--out", p(&d.join("t"))]);
    let s0 = d.join("t/stage0.msfc");
    ok(&["train", "--config", p(&cfg), "--stage", "1", "--resume", p(&s0), "--out", p(&d.join("t"))]);
    let manifest = fs::read_to_string(d.join("t/train_stage1.txt")).unwrap();
    assert!(manifest.contains("resumed_from") && manifest.contains("loss_log"));
    let ckpt = d.join("t/stage1.msfc");

    let sample = |out: &Path| {
        ok(&[
            "sample", "--ckpt", p(&ckpt), "--class", "1", "--steps", "4,2", "--cfg", "1.3,1.0", "--seed", "5",
            "--sequential", "--out", p(out),
        ])
    };
    sample(&d.join("s1"));
    sample(&d.join("s2"));
    for f in ["latent.lgrid", "image.lgrid", "residual0.lgrid", "residual1.lgrid", "prior1.lgrid"] {
        let a = fs::read(d.join("s1").join(f)).unwrap();
        assert_eq!(a, fs::read(d.join("s2").join(f)).unwrap(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s1/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["evaluations"], 10);
    assert_eq!(m["evaluations_per_sample"], 10);
    assert!(m["wall_seconds"].as_f64().unwrap() >= 0.0);
    assert!(!msf(&["sample", "--ckpt", p(&ckpt), "--class", "9", "--steps", "1,1", "--cfg", "1,1", "--out", p(&d.join("s3"))])
        .status
        .success());

    ok(&["run", "--config", p(&cfg), "--out", p(&d.join("r"))]);
    assert!(d.join("r/manifest.txt").is_file());
    let report = ok(&["eval", "--samples", p(&d.join("r/samples")), "--reference", p(&d.join("r/samples"))]);
    assert!(report.contains("mmd2 = "));
    assert!(report.contains("classes = 0,1"));
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nlearning_rate = 1\n").unwrap();
    let out = msf(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
