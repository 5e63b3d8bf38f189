//! End-to-end tests of the `basis` binary: exit codes, output files, and
//! determinism of the command surface.

use std::path::Path;
use std::process::{Command, Output};

use basis_core::data::synthetic_text;

fn basis_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_basis"))
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.txt");
    std::fs::write(&path, synthetic_text(30_000, 9)).unwrap();
    path
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let corpus = write_corpus(dir);
    let out = dir.join("out");
    let text = format!(
        "model.kind = transformer\n\
         model.d_model = 16\n\
         model.n_heads = 2\n\
         model.n_layers = 1\n\
         model.seq_len = 16\n\
         train.batch_size = 1\n\
         train.steps = 20\n\
         train.eval_interval = 10\n\
         train.eval_batches = 2\n\
         train.seed = 7\n\
         corpus.path = {}\n\
         output.dir = {}\n\
         {extra}",
        corpus.display(),
        out.display()
    );
    let path = dir.join("config.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    basis_bin().args(args).output().expect("binary runs")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

#[test]
fn train_writes_the_three_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let output = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(output.status.success(), "{}", stderr(&output));
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(csv.starts_with("step,train_loss,val_loss,rank,mode\n"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 3); // header + evals at 0, 10, 20
    assert!(out.join("report.txt").exists());
    let svg = std::fs::read_to_string(out.join("loss.svg")).unwrap();
    assert!(svg.starts_with("<svg version=\"1.1\""));
}

#[test]
fn missing_corpus_path_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = "model.d_model = 16\ntrain.steps = 10\ntrain.eval_interval = 10\n";
    let config = dir.path().join("config.conf");
    std::fs::write(&config, text).unwrap();
    let output = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("corpus.path"), "{}", stderr(&output));
}

#[test]
fn unknown_config_key_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.conf");
    std::fs::write(&config, "train.warp_speed = 9\n").unwrap();
    let output = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("train.warp_speed"), "{}", stderr(&output));
}

#[test]
fn override_changes_echoed_rank() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "train.mode = basis\ntrain.rank = 4\n");
    let output = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--override",
        "rank=8",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(report.contains("train.rank = 8"), "{report}");
}

#[test]
fn sweep_emits_one_trajectory_per_rank_plus_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let args = [
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--ranks",
        "1,4",
        "--jobs",
        "1",
    ];
    let output = run(&args);
    assert!(output.status.success(), "{}", stderr(&output));
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut variants: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            format!("{}/{}", cells[3], cells[4])
        })
        .collect();
    variants.sort();
    variants.dedup();
    assert_eq!(variants, vec!["0/exact", "1/basis", "4/basis"]);
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3, "{table}"); // header + 3 rows
    assert!(out.join("sweep.svg").exists());

    // Re-running with the same seed reproduces the CSV byte for byte.
    let again = run(&args);
    assert!(again.status.success());
    let csv_again = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv, csv_again);
}

#[test]
fn sweep_rejects_empty_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let output = run(&["sweep", "--config", config.to_str().unwrap(), "--ranks", ""]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("sweep.ranks"), "{}", stderr(&output));
}

#[test]
fn diagnose_passes_with_reduced_trials() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        "diag.sts_trials = 2000\ndiag.var_trials = 1000\n",
    );
    let output = run(&["diagnose", "--config", config.to_str().unwrap()]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = std::fs::read_to_string(dir.path().join("out/diagnose.txt")).unwrap();
    assert!(report.contains("[PASS]"));
    assert!(!report.contains("[FAIL]"), "{report}");
}

#[test]
fn diagnose_uniform_only_reports_control_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        "diag.sts_trials = 500\ndiag.var_trials = 500\ndiag.hashing = uniform\n",
    );
    let output = run(&["diagnose", "--config", config.to_str().unwrap()]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = std::fs::read_to_string(dir.path().join("out/diagnose.txt")).unwrap();
    assert!(report.contains("[CTRL]"), "{report}");
    assert!(!report.contains("[FAIL]"), "{report}");
}

#[test]
fn audit_reports_exact_ratio_and_batch_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(
        dir.path(),
        "model.d_model = 64\nmodel.n_layers = 2\nmodel.seq_len = 64\ntrain.rank = 32\n",
    );
    let output = run(&["audit", "--config", config.to_str().unwrap()]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = std::fs::read_to_string(dir.path().join("out/audit.txt")).unwrap();
    assert!(report.contains("compression: 2.0000x"), "{report}");
    assert!(report.contains("identical"), "{report}");
}

#[test]
fn numeric_abort_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let output = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--override",
        "lr=1e150",
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr(&output));
    assert!(stderr(&output).contains("step"), "{}", stderr(&output));
}

#[test]
fn rank_zero_in_basis_mode_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "train.mode = basis\ntrain.rank = 0\n");
    let output = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("train.rank"), "{}", stderr(&output));
}
