use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moedpo::commands::{build_model, generate_in_memory};
use moedpo::config::Config;
use moedpo::eval::evaluate;
use moedpo::io::{read_dataset, read_json, Checkpoint};

const SMALL: &str = r#"
schema_version = 1
seed = 11
[data]
num_experts = 2
num_prompts = 8
vocab_size = 5
num_triplets = 300
holdout_prompts = 2
[train]
epochs = 3
[train.hyper]
batch_size = 64
"#;

fn moedpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moedpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_pipeline(dir: &Path, cfg: &str, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    ok(moedpo(&["generate", "--config", cfg, "--out", out]));
    let mut train = vec!["train", "--config", cfg, "--out", out];
    train.extend_from_slice(extra);
    ok(moedpo(&train));
}

#[test]
fn pipeline_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    for extra in [&["--algorithm", "em"][..], &["--algorithm", "mc", "--mode", "moe", "--tau", "0.5"][..]] {
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        run_pipeline(&a, &cfg, extra);
        run_pipeline(&b, &cfg, extra);
        for file in ["dataset.jsonl", "ground_truth.json", "checkpoint.json", "metrics.csv"] {
            assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
        }
        fs::remove_dir_all(&a).unwrap();
        fs::remove_dir_all(&b).unwrap();
    }
}

#[test]
fn seed_flag_changes_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(moedpo(&["generate", "--config", &cfg, "--out", a.to_str().unwrap()]));
    ok(moedpo(&["generate", "--config", &cfg, "--seed", "12", "--out", b.to_str().unwrap()]));
    assert_ne!(fs::read(a.join("dataset.jsonl")).unwrap(), fs::read(b.join("dataset.jsonl")).unwrap());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path());
    let dir = tmp.path().join("run");
    run_pipeline(&dir, &cfg_path, &["--epochs", "0"]);
    let ck = Checkpoint::load(&dir.join("checkpoint.json")).unwrap();
    let mut cfg = Config::load(Path::new(&cfg_path)).unwrap();
    cfg.train.epochs = 0;
    let g = generate_in_memory(&cfg).unwrap();
    let data = read_dataset(&dir.join("dataset.jsonl")).unwrap();
    assert_eq!(data.triplets, g.triplets);
    let init = build_model(&cfg, None, Some(&g.ground_truth)).unwrap();
    assert_eq!(ck.state.model, init);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a, &cfg, &["--epochs", "4"]);
    run_pipeline(&b, &cfg, &["--epochs", "2"]);
    ok(moedpo(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--epochs", "4", "--resume"]));
    let ca = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    let cb = Checkpoint::load(&b.join("checkpoint.json")).unwrap();
    assert_eq!(ca.state, cb.state);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn eval_after_reload_matches_in_memory_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dir = tmp.path().join("run");
    run_pipeline(&dir, &cfg, &[]);
    let out = ok(moedpo(&["eval", "--out", dir.to_str().unwrap()]));
    let printed: moedpo::eval::EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    let written: moedpo::eval::EvalReport = read_json(&dir.join("eval.json")).unwrap();
    assert_eq!(printed, written);
    let ck = Checkpoint::load(&dir.join("checkpoint.json")).unwrap();
    let data = read_dataset(&dir.join("dataset.jsonl")).unwrap();
    let gt = read_json(&dir.join("ground_truth.json")).unwrap();
    let holdout = read_json(&dir.join("holdout.json")).unwrap();
    let direct = evaluate(&ck.state.model, &data.triplets, Some(&gt), Some(&holdout)).unwrap();
    assert_eq!(direct, written);
    assert!(written.heldout_gating_accuracy.is_some());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "schema_version = 1\n[train]\nepoch = 3\n").unwrap();
    let out = moedpo(&["generate", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn missing_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = moedpo(&["train", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_prints_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(moedpo(&["verify", "--seed", "5", "--out", tmp.path().to_str().unwrap()]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("coverage manifest:"));
    assert!(!text.contains("FAIL"));
    assert!(tmp.path().join("verify.json").exists());
}

#[test]
fn injected_fault_fails_exactly_the_closed_form_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = moedpo(&["verify", "--fault-inject", "policy-exponent", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report: moedpo::verify::VerifyReport = read_json(&tmp.path().join("verify.json")).unwrap();
    let mut failed: Vec<&str> = report.failures().iter().map(|c| c.id.as_str()).collect();
    failed.sort_unstable();
    assert_eq!(failed, ["closed_form_optimality", "reward_round_trip"]);
}

#[test]
fn unknown_fault_is_rejected() {
    let out = moedpo(&["verify", "--fault-inject", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}
