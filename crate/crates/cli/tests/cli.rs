use std::path::Path;
use std::process::{Command, Output};

use atgnn::checkpoint;
use atgnn::{Atgnn64, RunConfig};

fn atgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atgnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_data(dir: &Path, count: usize) {
    let out = dir.join("data");
    let o = atgnn(&[
        "gen-data",
        "--classes",
        "8",
        "--count",
        &count.to_string(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, extra_train: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "[model]\npreset = \"tiny\"\n\n[train]\npreset = \"tiny\"\nsamples_per_epoch = 8\nbatch_size = 4\n{extra_train}\n\n\
         [data]\ntrain_manifest = \"data/manifest.jsonl\"\nval_manifest = \"data/manifest.jsonl\"\noutput_dir = \"out\"\n"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_writes_manifest_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 12);
    let data = dir.path().join("data");
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    let vocab: Vec<String> = serde_json::from_str(&std::fs::read_to_string(data.join("vocab.json")).unwrap()).unwrap();
    assert_eq!(vocab.len(), 8);
    assert!(data.join("clip_00011.wav").exists());
}

#[test]
fn zero_epoch_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 8);
    let cfg = write_config(dir.path(), "epochs = 0");
    let o = atgnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (saved, st) = checkpoint::load::<f64>(&dir.path().join("out/last.ckpt")).unwrap();
    assert_eq!(st.epoch, 0);
    assert_eq!(st.adam.step, 0);
    let fresh = Atgnn64::new(saved.model.clone()).unwrap();
    assert_eq!(st.model.params(), fresh.params());
    assert_ne!(saved.model.input_std, RunConfig::tiny().model.input_std);
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 16);
    let cfg = write_config(dir.path(), "epochs = 2");
    let o = atgnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let log = std::fs::read_to_string(dir.path().join("out/train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert_eq!(lines[1]["step"], 4);
    assert!(lines[1]["loss"].as_f64().unwrap().is_finite());
    assert!(lines[1]["val_mAP"].as_f64().is_some());

    let ckpt = dir.path().join("out/last.ckpt");
    let (_, st) = checkpoint::load::<f64>(&ckpt).unwrap();
    assert_eq!(st.epoch, 2);

    let manifest = dir.path().join("data/manifest.jsonl");
    let o = atgnn(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval_report.json")).unwrap()).unwrap();
    let map = report["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(report["per_class_ap"].as_array().unwrap().len(), 8);

    let o = atgnn(&["export-graph", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.len() == 8));
    let adj = st.model.params().get("mlg.0.adj").unwrap();
    assert_eq!(rows[2][5], adj.row(2)[5]);

    let o = atgnn(&["export-graph", "--ckpt", ckpt.to_str().unwrap(), "--block", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 8);
    let cfg = write_config(dir.path(), "epochs = 1");
    let o = atgnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("out/last.ckpt");
    let cfg = write_config(dir.path(), "epochs = 2");
    let o = atgnn(&["train", "--config", cfg.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, st) = checkpoint::load::<f64>(&ckpt).unwrap();
    assert_eq!(st.epoch, 2);
    let log = std::fs::read_to_string(dir.path().join("out/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    std::fs::write(&cfg, "[model]\npreset = \"tiny\"\n").unwrap();
    let o = atgnn(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let err: f64 = line
        .split_whitespace()
        .nth(4)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output: {line}"));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\npreset = \"tiny\"\nk = 0\n[data]\ntrain_manifest = \"m.jsonl\"\n").unwrap();
    let o = atgnn(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.k"), "{}", stderr(&o));

    std::fs::write(&cfg, "[model]\nunknown_knob = 1\n").unwrap();
    let o = atgnn(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_knob"), "{}", stderr(&o));
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1");
    let o = atgnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = atgnn(&["eval", "--ckpt", "/nonexistent/x.ckpt", "--manifest", "/nonexistent/m.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_thread_count_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_atgnn"))
        .args(["gen-data", "--classes", "2", "--count", "2", "--out", "/nonexistent/never"])
        .env("ATGNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ATGNN_THREADS"));
}
