use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fooling::data::decode_pnm;
use fooling::metrics::{fsr, read_records_csv, FsrSpec};
use fooling_cli::commands::FsrOutput;

fn fooling(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fooling")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fooling(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = fooling(dir, args);
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with("error["), "{err}");
    (out.status.code().unwrap(), lines[0].to_string())
}

/// Glyph data plus a briefly trained checkpoint.
fn setup(dir: &Path) {
    ok(dir, &["synth", "--n-train", "300", "--n-val", "100", "--seed", "4", "--out", "d"]);
    ok(dir, &["train", "--data", "d/train-images.idx", "--epochs", "1", "--seed", "2", "--out", "w0.ckpt"]);
}

fn pipeline(dir: &Path) {
    setup(dir);
    ok(dir, &["fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--method", "topk", "--iters", "15", "--seed", "3", "--out", "w.ckpt"]);
    ok(dir, &["fsr", "--original", "w0.ckpt", "--fooled", "w.ckpt", "--method", "topk", "--data", "d/val-images.idx", "--out", "fsr"]);
}

#[test]
fn train_fool_fsr_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["w0.ckpt", "w0.ckpt.log.csv", "w.ckpt", "w.ckpt.log.csv", "fsr/records.csv", "fsr/report.json", "fsr/manifest.json"] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn report_regenerates_from_records_csv() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let report: FsrOutput = serde_json::from_slice(&fs::read(d.path().join("fsr/report.json")).unwrap()).unwrap();
    let (method, _, records) = read_records_csv(fs::File::open(d.path().join("fsr/records.csv")).unwrap()).unwrap();
    let spec = FsrSpec::new(method, report.interval[0], report.interval[1]).unwrap();
    assert_eq!(fsr(&records, &spec).unwrap(), report.fsr);
    assert_eq!(records.len(), report.records);
    let r = &report.report;
    assert_eq!(r.accuracy_delta, r.baseline_acc - r.fooled_acc);
    let table = &r.fsr_table;
    assert_eq!((table.rows.clone(), table.cols.clone()), (vec!["gradcam".to_string()], vec!["gradcam".to_string()]));
    assert_eq!(table.values[0][0], Some(report.fsr));
}

#[test]
fn fooling_leaves_input_checkpoint_untouched() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    let before = fs::read(d.path().join("w0.ckpt")).unwrap();
    ok(d.path(), &["fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--method", "location", "--iters", "3", "--out", "w.ckpt"]);
    assert_eq!(fs::read(d.path().join("w0.ckpt")).unwrap(), before);
    let (code, _) = fails(d.path(), &["fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--method", "location", "--out", "w0.ckpt"]);
    assert_eq!(code, 2);
    assert_eq!(fs::read(d.path().join("w0.ckpt")).unwrap(), before);
}

#[test]
fn unchanged_model_has_zero_centermass_fsr() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    let out = ok(d.path(), &["fsr", "--original", "w0.ckpt", "--fooled", "w0.ckpt", "--method", "centermass", "--data", "d/val-images.idx"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["fsr"], 0.0);
}

#[test]
fn heatmap_images_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    let args = |out: &'static str, style: &'static str| {
        vec!["heatmap", "--ckpt", "w0.ckpt", "--data", "d/val-images.idx", "--index", "5", "--style", style, "--out", out]
    };
    ok(d.path(), &args("a.pgm", "gray"));
    ok(d.path(), &args("b.pgm", "gray"));
    let a = fs::read(d.path().join("a.pgm")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.pgm")).unwrap());
    let img = decode_pnm(&a).unwrap();
    assert_eq!((img.width, img.height, img.channels), (28, 28, 1));
    assert_eq!(*img.pixels.iter().max().unwrap(), 255);
    ok(d.path(), &args("c.ppm", "diverging"));
    let img = decode_pnm(&fs::read(d.path().join("c.ppm")).unwrap()).unwrap();
    assert_eq!(img.channels, 3);
    assert!(d.path().join("c.ppm.manifest.json").is_file());
}

#[test]
fn compose_then_active_fooling() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    ok(d.path(), &["compose", "--data", "d/train-images.idx", "--c1", "0", "--c2", "1", "--n", "40", "--out", "comp"]);
    let bytes = fs::read(d.path().join("comp/train-images.idx")).unwrap();
    let imgs = fooling::data::parse_idx_images(&bytes).unwrap();
    assert_eq!((imgs.rows, imgs.cols), (56, 56));
    ok(d.path(), &["fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--method", "active", "--fool-data", "comp/train-images.idx", "--iters", "3", "--out", "wa.ckpt"]);
    let (code, _) = fails(d.path(), &["fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--method", "active", "--out", "x.ckpt"]);
    assert_eq!(code, 2);
    let out = ok(d.path(), &["fsr", "--original", "w0.ckpt", "--fooled", "wa.ckpt", "--method", "active", "--data", "comp/holdout-images.idx", "--eval-data", "d/val-images.idx"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let holdout = fooling::data::parse_idx_images(&fs::read(d.path().join("comp/holdout-images.idx")).unwrap()).unwrap();
    assert_eq!(imgs.count + holdout.count, 40);
    // two records (one per class) for every holdout composite
    assert_eq!(v["records"].as_u64().unwrap() + v["excluded"].as_u64().unwrap(), 2 * holdout.count as u64);
}

#[test]
fn aopc_and_perturb_write_curves() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    ok(d.path(), &["aopc", "--ckpt", "w0.ckpt", "--original", "w0.ckpt", "--data", "d/val-images.idx", "--steps", "5", "--out", "ao"]);
    let csv = fs::read_to_string(d.path().join("ao/aopc.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,fooled,original,random");
    assert_eq!(csv.lines().count(), 7);
    // the same checkpoint as original and fooled gives identical curves
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], f[2]);
    }
    let out = ok(d.path(), &["perturb", "--ckpt", "w0.ckpt", "--data", "d/val-images.idx", "--sigmas", "0,0.01", "--trials", "2", "--out", "pt"]);
    let eval = ok(d.path(), &["eval", "--ckpt", "w0.ckpt", "--data", "d/val-images.idx"]);
    let (p, e): (serde_json::Value, serde_json::Value) = (serde_json::from_str(&out).unwrap(), serde_json::from_str(&eval).unwrap());
    assert_eq!(p["points"][0]["accuracy"], e["accuracy"]);
}

#[test]
fn usage_and_runtime_errors() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(fails(p, &["frobnicate"]).0, 2);
    assert_eq!(fails(p, &["train", "--data", "x", "--unknown-flag", "1"]).0, 2);
    let (code, line) = fails(p, &["eval", "--ckpt", "nope.ckpt", "--data", "nope.idx"]);
    assert_eq!(code, 2);
    assert!(line.contains("missing file"), "{line}");
    assert_eq!(fails(p, &["eval", "--data", "nope.idx"]).0, 2);
    fs::write(p.join("bad.ckpt"), b"not a checkpoint").unwrap();
    fs::write(p.join("imgs.idx"), [0u8, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
    let (code, line) = fails(p, &["eval", "--ckpt", "bad.ckpt", "--data", "imgs.idx"]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error[bad_magic]"), "{line}");
    fs::write(p.join("cfg.json"), b"{\"no-such-flag\": 1}").unwrap();
    assert_eq!(fails(p, &["--config", "cfg.json", "eval"]).0, 2);
    fs::write(p.join("cfg.json"), b"{not json").unwrap();
    assert_eq!(fails(p, &["--config", "cfg.json", "eval"]).0, 2);
}

#[test]
fn config_supplies_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    setup(d.path());
    fs::write(d.path().join("cfg.json"), br#"{"method": "location", "iters": 4, "lr": 0.002}"#).unwrap();
    ok(d.path(), &["--config", "cfg.json", "fool", "--ckpt", "w0.ckpt", "--data", "d/train-images.idx", "--lr", "0.001", "--out", "w.ckpt"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("w.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["flags"]["iters"], 4);
    assert_eq!(m["flags"]["lr"], 0.001);
    assert_eq!(m["flags"]["method"], "location");
    assert_eq!(fs::read_to_string(d.path().join("w.ckpt.log.csv")).unwrap().lines().count(), 5);
    let sha = fooling_cli::manifest::sha256_file(&d.path().join("w0.ckpt")).unwrap();
    assert_eq!(m["checkpoints"]["ckpt"], sha);
}
