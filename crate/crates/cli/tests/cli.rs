use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualguide_core::pipeline::{read_csv, summarize, DetailRow, SummaryRow};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.toml")
}

fn run(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualguide"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("DUALGUIDE_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, &tiny_config(), args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pgm_size(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(20)]).to_string();
    let mut it = header.split_whitespace();
    assert_eq!(it.next(), Some("P5"));
    (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoints_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["train"]);
    ok(b.path(), &["train"]);
    for f in ["codec.ckpt", "denoiser.ckpt", "perceptual.ckpt"] {
        let pa = a.path().join("checkpoints").join(f);
        assert_eq!(
            fs::read(&pa).unwrap(),
            fs::read(b.path().join("checkpoints").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = a.path().join("train_manifest.json");
    assert_eq!(
        fs::read(&manifest).unwrap(),
        fs::read(b.path().join("train_manifest.json")).unwrap()
    );
    let m = json(&manifest);
    assert_eq!(m["checkpoints"].as_object().unwrap().len(), 3);
    assert_eq!(m["seed"], 3);
    // nothing staged is left behind
    let leftovers: Vec<_> = walk(a.path())
        .into_iter()
        .filter(|p| p.to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn component_training_reuses_codec() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &tiny_config(), &["train", "--component", "denoiser"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("codec.ckpt"));
    ok(d.path(), &["train", "--component", "codec"]);
    ok(d.path(), &["train", "--component", "denoiser"]);
    let m = json(&d.path().join("train_manifest.json"));
    assert_eq!(m["trained"], serde_json::json!(["denoiser"]));
    assert_eq!(m["checkpoints"].as_object().unwrap().len(), 2);
}

#[test]
fn bad_config_key_is_named() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[guidance]\ngamma = \"lots\"\n").unwrap();
    let o = run(d.path(), &cfg, &["train"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("guidance.gamma"), "{err}");

    fs::write(&cfg, "[codec]\nepochz = 3\n").unwrap();
    let err = String::from_utf8_lossy(&run(d.path(), &cfg, &["train"]).stderr).to_string();
    assert!(err.contains("codec") && err.contains("epochz"), "{err}");
}

#[test]
fn missing_checkpoint_error_names_path() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &tiny_config(),
        &["edit", "--src-index", "0", "--mode", "text_opt"],
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains(&d.path().join("checkpoints").display().to_string()),
        "{err}"
    );
}

#[test]
fn edit_writes_images_tables_and_hash() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(
        d.path(),
        &["edit", "--src-index", "4", "--mode", "text_opt_plus_perceptual"],
    );
    let edits = d.path().join("edits");
    let key = fs::read_dir(&edits).unwrap().next().unwrap().unwrap().path();
    let dir = key.join("text_opt_plus_perceptual");
    for f in ["source.pgm", "edited.pgm", "steps.csv", "result.csv", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert_eq!(pgm_size(&dir.join("edited.pgm")), (16, 16));
    let steps = fs::read_to_string(dir.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 4);
    let base = json(&dir.join("manifest.json"))["config_sha256"].clone();

    ok(
        d.path(),
        &[
            "edit",
            "--src-index",
            "4",
            "--mode",
            "text_opt_plus_perceptual",
            "--lambda",
            "0.5",
        ],
    );
    let changed = json(&dir.join("manifest.json"))["config_sha256"].clone();
    assert_ne!(base, changed);

    let o = run(
        d.path(),
        &tiny_config(),
        &["edit", "--src-index", "4", "--mode", "sideways"],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown mode"));
}

#[test]
fn eval_summarises_every_mode() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    let table = ok(d.path(), &["eval", "--run"]);
    assert!(table.contains("text_opt_plus_perceptual"));
    let eval = d.path().join("eval");
    let summary: Vec<SummaryRow> = read_csv(fs::File::open(eval.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 3);
    assert!(summary.iter().all(|r| r.n == 3));
    let details: Vec<DetailRow> = read_csv(fs::File::open(eval.join("details.csv")).unwrap()).unwrap();
    assert_eq!(details.len(), 9);
    let again = summarize(&details.iter().map(|r| (r.mode, r.metrics())).collect::<Vec<_>>()).unwrap();
    for (a, b) in summary.iter().zip(&again) {
        assert_eq!(a.mode, b.mode);
        assert!((a.psnr_mean - b.psnr_mean).abs() < 1e-9);
        assert!((a.perceptual_mean - b.perceptual_mean).abs() < 1e-9);
        assert!((a.alignment_mean - b.alignment_mean).abs() < 1e-9);
    }
    let strips: Vec<_> = fs::read_dir(eval.join("strips"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(strips.len(), 3);
    assert_eq!(pgm_size(&strips[0]), (4 * 16 + 3, 16));
}

#[test]
fn eval_reports_missing_modes() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(d.path(), &["edit", "--src-index", "0", "--mode", "null_text"]);
    let o = run(d.path(), &tiny_config(), &["eval"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("present: [null_text]"), "{err}");
}

#[test]
fn invert_and_dataset_commands() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["dataset", "--split", "eval"]);
    let index = fs::read_to_string(d.path().join("dataset/eval/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 36);
    ok(d.path(), &["train"]);
    let line = ok(d.path(), &["invert", "--src-index", "1"]);
    assert!(line.contains("psnr"));
    assert_eq!(pgm_size(&d.path().join("invert/001/reconstruction.pgm")), (16, 16));
}

#[test]
fn unguided_null_text_edit_reproduces_reconstruction() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["train"]);
    ok(d.path(), &["invert", "--src-index", "2", "--gamma", "1"]);
    ok(d.path(), &["edit", "--src-index", "2", "--mode", "null_text", "--gamma", "1", "--beta", "0"]);
    let key = fs::read_dir(d.path().join("edits")).unwrap().next().unwrap().unwrap().path();
    assert_eq!(
        fs::read(key.join("null_text/edited.pgm")).unwrap(),
        fs::read(d.path().join("invert/002/reconstruction.pgm")).unwrap()
    );
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
