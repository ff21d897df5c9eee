use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hfm_core::io::{read_depth_png, read_manifest, read_normal_png, sha256_hex};

const TINY: &str = "
[data]
train_samples = 4
validation_samples = 1
[scene]
width = 16
height = 16
[network]
width = 16
height = 16
rgb_widths = [4, 4, 8, 8, 8]
depth_widths = [4, 4, 8, 8]
confidence_widths = [4, 4, 4, 4, 1]
[schedule]
epochs = 3
warmup_epochs = 1
batch_size = 2
";

fn hfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfm")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = hfm(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut all = Vec::new();
    for n in names {
        all.extend_from_slice(n.to_string_lossy().as_bytes());
        all.extend(fs::read(dir.join(&n)).unwrap());
    }
    sha256_hex(&all)
}

#[test]
fn synth_writes_manifest_and_files() {
    let d = setup();
    ok(&["synth", "--config", "tiny.toml", "--count", "0", "--out", "empty"], d.path());
    assert!(read_manifest(&d.path().join("empty")).unwrap().samples.is_empty());

    ok(&["synth", "--config", "tiny.toml", "--count", "3", "--out", "a", "--seed", "9"], d.path());
    ok(&["synth", "--config", "tiny.toml", "--count", "3", "--out", "b", "--seed", "9"], d.path());
    let m = read_manifest(&d.path().join("a")).unwrap();
    assert_eq!(m.samples.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![9, 10, 11]);
    let rgb_files = fs::read_dir(d.path().join("a")).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_rgb.png")
    });
    assert_eq!(rgb_files.count(), m.samples.len());
    assert_eq!(dir_digest(&d.path().join("a")), dir_digest(&d.path().join("b")));
}

#[test]
fn train_is_deterministic_and_resumable() {
    let d = setup();
    let p = d.path();
    ok(&["train", "--config", "tiny.toml", "--out", "r1", "--seed", "4"], p);
    ok(&["train", "--config", "tiny.toml", "--out", "r2", "--seed", "4"], p);
    let a = fs::read(p.join("r1/last.ckpt")).unwrap();
    assert_eq!(a, fs::read(p.join("r2/last.ckpt")).unwrap());
    assert_eq!(fs::read(p.join("r1/report.txt")).unwrap(), fs::read(p.join("r2/report.txt")).unwrap());
    assert!(p.join("r1/epoch_002.ckpt").exists());

    ok(&["train", "--config", "tiny.toml", "--out", "r3", "--seed", "4", "--stop-after", "1"], p);
    ok(&["train", "--config", "tiny.toml", "--out", "r3", "--seed", "4", "--resume", "r3/epoch_000.ckpt"], p);
    assert_eq!(a, fs::read(p.join("r3/last.ckpt")).unwrap());

    let log = fs::read_to_string(p.join("r1/train.log")).unwrap();
    let steps: Vec<_> = log.lines().filter(|l| !l.starts_with("epoch")).collect();
    assert_eq!(steps.len(), 6);
    for l in steps {
        let f: Vec<_> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert!(f[3].parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch,")).count(), 3);
}

#[test]
fn variant_flag_selects_model() {
    let d = setup();
    ok(&["train", "--config", "tiny.toml", "--out", "late", "--variant", "late", "--stop-after", "1"], d.path());
    let ck = hfm_core::io::Checkpoint::read(&d.path().join("late/last.ckpt")).unwrap();
    assert_eq!(ck.config.network.variant, hfm_core::network::FusionVariant::Late);
    assert_eq!(hfm(&["train", "--variant", "sideways"], d.path()).status.code(), Some(1));
}

#[test]
fn eval_predict_and_depth2normal() {
    let d = setup();
    let p = d.path();
    ok(&["synth", "--config", "tiny.toml", "--count", "2", "--out", "ds"], p);
    let gt = ok(&["eval", "--ground-truth", "--dataset", "ds"], p);
    assert!(gt.contains("mean") && gt.lines().any(|l| l.starts_with("mean") && l.trim_end().ends_with("0.0000")), "{gt}");

    ok(&["train", "--config", "tiny.toml", "--out", "run", "--stop-after", "1"], p);
    let r1 = ok(&["eval", "--checkpoint", "run/last.ckpt", "--dataset", "ds"], p);
    assert_eq!(r1, ok(&["eval", "--checkpoint", "run/last.ckpt", "--dataset", "ds"], p));
    ok(&["eval", "--depth-baseline", "--dataset", "ds"], p);

    ok(
        &[
            "predict", "--checkpoint", "run/last.ckpt", "--rgb", "ds/00000000_rgb.png", "--depth",
            "ds/00000000_depth.png", "--out-normal", "n.png", "--out-confidence", "c.png",
        ],
        p,
    );
    let n = read_normal_png(&p.join("n.png")).unwrap();
    assert_eq!((n.width(), n.height()), (16, 16));
    for i in 0..n.len() {
        if let Some(v) = n.get(i) {
            let norm = v.iter().map(|c| (*c as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-4);
        }
    }
    assert!(p.join("c.png").exists());

    ok(&["depth2normal", "--depth", "ds/00000000_depth.png", "--out", "dn.png"], p);
    let depth = read_depth_png(&p.join("ds/00000000_depth.png")).unwrap();
    assert_eq!(read_normal_png(&p.join("dn.png")).unwrap().len(), depth.len());
}

#[test]
fn exit_codes() {
    let d = setup();
    let p = d.path();
    assert_eq!(hfm(&[], p).status.code(), Some(1));
    assert_eq!(hfm(&["frobnicate"], p).status.code(), Some(1));
    assert_eq!(hfm(&["--help"], p).status.code(), Some(0));
    let help = ok(&["--help-config"], p);
    assert!(help.contains("[schedule]") && help.contains("learning_rate"));

    fs::write(p.join("bad.toml"), "[schedule]\nnot_a_key = 1\n").unwrap();
    assert_eq!(hfm(&["train", "--config", "bad.toml"], p).status.code(), Some(1));

    ok(&["train", "--config", "tiny.toml", "--out", "run", "--stop-after", "1"], p);
    let mut bytes = fs::read(p.join("run/last.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(p.join("broken.ckpt"), bytes).unwrap();
    ok(&["synth", "--config", "tiny.toml", "--count", "1", "--out", "ds"], p);
    let out = hfm(&["eval", "--checkpoint", "broken.ckpt", "--dataset", "ds"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    fs::write(p.join("nan.toml"), format!("{TINY}learning_rate = 1e38\n")).unwrap();
    let out = hfm(&["train", "--config", "nan.toml", "--out", "nan"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
