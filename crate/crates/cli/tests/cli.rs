//! End-to-end runs of the `orthogeo` binary on small configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--set", "depth=2", "--set", "branching=3", "--set", "per_concept=10", "--set", "d_feat=16", "--set", "d_emb=16",
    "--rank", "4", "--max-steps", "40",
];

fn orthogeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthogeo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", dir.to_str().unwrap(), "--eval-interval", "10", "--lr", "0.01"];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    orthogeo(&args)
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "manifest.json", "convergence.csv", "metrics.csv", "spectrum.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let metrics = read(&dir.path().join("metrics.csv"));
    assert!(metrics.starts_with("Method,MRR,Recall@1,Recall@3,NDCG@1,NDCG@3\nOrthoGeoLoRA,"));
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["method"], "OrthoGeoLoRA");
    assert_eq!(manifest["param_counts"]["trainable"], 4 * (16 + 16) + 4);
    assert!(read(&dir.path().join("convergence.csv")).starts_with("step,train_loss,val_mrr\n0,"));
}

#[test]
fn invalid_rank_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = orthogeo(&["train", "--out", dir.path().to_str().unwrap(), "--rank", "0"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("checkpoint.json").exists());
    let out = orthogeo(&["train", "--out", dir.path().to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn rerun_from_manifest_is_bit_identical() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(first.path(), &["--method", "lora"])), 0);
    let manifest = first.path().join("manifest.json");
    let out = orthogeo(&["train", "--config", manifest.to_str().unwrap(), "--out", second.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "manifest.json", "convergence.csv", "metrics.csv", "spectrum.csv"] {
        assert_eq!(fs::read(first.path().join(f)).unwrap(), fs::read(second.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn eval_reproduces_training_metrics_and_rejects_corrupt_input() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path(), &[])), 0);
    let trained = read(&dir.path().join("metrics.csv"));
    let csv = dir.path().join("eval.csv");
    let out = orthogeo(&[
        "eval",
        dir.path().join("checkpoint.json").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&csv), trained);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), trained);
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("eval.json"))).unwrap();
    let mrr = report["mrr"].as_f64().unwrap();
    let row_mrr: f64 = trained.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((mrr - row_mrr).abs() < 1e-9);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"config\": 3").unwrap();
    assert_eq!(code(&orthogeo(&["eval", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&orthogeo(&["eval", dir.path().join("absent.json").to_str().unwrap()])), 2);
}

#[test]
fn zero_lr_checkpoint_on_noiseless_data_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), &["--set", "noise=0", "--set", "mix=0", "--set", "lr=0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = orthogeo(&["eval", dir.path().join("checkpoint.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let row = read(&dir.path().join("metrics.csv"));
    let values: Vec<f64> = row.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(values, vec![1.0; 5]);
}

#[test]
fn gradcheck_passes() {
    let out = orthogeo(&["gradcheck", "--seeds", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("overall max rel error"));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("orth_map ")).count(), 1);
}

#[test]
fn spectrum_combines_checkpoints() {
    let og = tempfile::tempdir().unwrap();
    let lora = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(og.path(), &[])), 0);
    assert_eq!(code(&train_small(lora.path(), &["--method", "lora"])), 0);
    let csv = og.path().join("both.csv");
    let out = orthogeo(&[
        "spectrum",
        og.path().join("checkpoint.json").to_str().unwrap(),
        lora.path().join("checkpoint.json").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(&csv);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,r,idx,sigma"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|l| l.starts_with("OrthoGeoLoRA,4,")).count(), 4);
    assert_eq!(rows.iter().filter(|l| l.starts_with("LoRA,4,")).count(), 4);
}

#[test]
fn ablate_fills_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--ranks", "2,4", "--seeds", "1,2", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let out = orthogeo(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(&dir.path().join("ablation.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,r,seed,mrr"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().is_ok()));
    assert_eq!(read(&dir.path().join("ablation_summary.csv")).lines().count(), 5);
}
