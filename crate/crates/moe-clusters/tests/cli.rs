//! Process-level tests of the `moe-clusters` binary: exit codes, artifact
//! layout, and the diagnostic subcommands' pass/fail reporting. Everything
//! runs the real executable via `CARGO_BIN_EXE` against throwaway configs in
//! temp directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_moe-clusters")
}

/// A deliberately tiny experiment so every invocation finishes in tens of
/// milliseconds.
const TINY_CONFIG: &str = r#"
[task]
kind = "regression"
groups = 4
input_dim = 6
output_dim = 3
noise = 0.1

[model]
experts = 4
clusters = 2
hidden_dim = 8
ffn_dim = 8
routing_dim = 4
capacity_factor = 2.0
gating = "softmax"

[train]
steps = 40
batch_size = 16
train_size = 64
val_size = 32
learning_rate = 3e-3
balance_coef = 0.01
clustering_coef = 0.01
mu = 0.0
dropout = "none"
log_every = 10
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).expect("write config");
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(exe())
        .args(args)
        .output()
        .expect("spawn binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_writes_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_CONFIG);
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,total,task,balance,clustering,c_intra,c_inter,overflow_rate,temperature,val_task"
    );
    // Steps 0,10,20,30 are on the logging grid and step 39 is the final one.
    assert_eq!(lines.count(), 5, "expected 5 logged rows");
    let fractions = std::fs::read_to_string(out_dir.join("fractions.csv")).unwrap();
    assert_eq!(
        fractions.lines().next().unwrap(),
        "step,phase,expert,cluster,fraction"
    );
    // 5 logged train rows and one final val row, 4 experts each.
    assert_eq!(fractions.lines().count(), 1 + 5 * 4 + 4);
    assert!(out_dir.join("checkpoint.txt").exists());
    let text = stdout(&out);
    assert!(text.contains("validation:"), "stdout: {text}");
}

#[test]
fn quiet_flag_silences_progress_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_CONFIG);
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success());
    assert!(
        stdout(&out).is_empty(),
        "quiet run still printed: {}",
        stdout(&out)
    );
}

#[test]
fn invalid_config_exits_two_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = TINY_CONFIG.replace(
        "dropout = \"none\"",
        "dropout = \"cluster\"\ndropout_rate = 1.0",
    );
    let config = write_config(tmp.path(), &bad);
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("dropout_rate"),
        "error should name the offending key, got: {}",
        stderr(&out)
    );
}

#[test]
fn missing_config_file_exits_one() {
    let out = run(&["train", "--config", "/nonexistent/experiment.toml"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_grads_passes_and_reports_every_pillar() {
    let out = run(&["check-grads", "--seed", "3"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("[ok]").count(), 5, "stdout: {text}");
    assert!(!text.contains("[FAIL]"));
    for pillar in [
        "gating-stack",
        "balance-loss",
        "clustering-loss-mu0",
        "clustering-loss-mu1",
        "full-model",
    ] {
        assert!(text.contains(pillar), "missing pillar {pillar}: {text}");
    }
}

#[test]
fn injected_gradient_fault_makes_check_grads_fail() {
    let out = run(&["check-grads", "--inject-sign-flip"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert_eq!(
        text.matches("[FAIL]").count(),
        2,
        "the sign flip hits exactly the two clustering pillars: {text}"
    );
    assert!(text.contains("clustering-loss-mu0") && text.contains("clustering-loss-mu1"));
}

#[test]
fn validate_oracles_confirms_every_identity() {
    let out = run(&["validate-oracles"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("[ok]").count(), 9, "stdout: {text}");
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn dropout_rate_sweep_runs_both_mask_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{TINY_CONFIG}\n[sweep]\naxis = \"dropout_rate\"\nvalues = [0.0, 0.5]\nseeds = [0, 1]\n"
    );
    let config = write_config(tmp.path(), &body);
    let out_dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "axis,value,dropout_level,seed,final_val_task,best_val_task,best_val_step,final_val_c_intra,mean_overflow,final_balance,final_clustering"
    );
    let rows: Vec<&str> = lines.collect();
    // 2 values × 2 seeds × 2 mask levels.
    assert_eq!(rows.len(), 8, "csv: {csv}");
    assert_eq!(rows.iter().filter(|r| r.contains(",cluster,")).count(), 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",global,")).count(), 4);
}

#[test]
fn cluster_count_sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{TINY_CONFIG}\n[sweep]\naxis = \"cluster_count\"\nvalues = [1, 2, 4]\nseeds = [0, 1]\n"
    );
    let config = write_config(tmp.path(), &body);
    let out_dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    // With 4 clusters over 4 experts every cluster is a singleton, so the
    // intra-cluster variance is identically zero.
    for row in csv
        .lines()
        .skip(1)
        .filter(|r| r.starts_with("cluster_count,4,"))
    {
        let c_intra = row.split(',').nth(7).unwrap();
        assert_eq!(
            c_intra, "0",
            "singleton-cluster row should log c_intra 0: {row}"
        );
    }
}

#[test]
fn stats_writes_one_row_per_expert() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY_CONFIG);
    let out_dir = tmp.path().join("stats");
    let out = run(&[
        "stats",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("stats.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "expert,cluster,tokens,fraction,mean_prob,within_cluster"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    // At capacity factor 2 with 4 experts, no expert can hold more than half
    // the batch; the remainder after overflow is what the fractions sum to.
    let mut total = 0.0;
    for row in &rows {
        let fraction: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!(
            (0.0..=0.5).contains(&fraction),
            "fraction outside the capacity bound: {row}"
        );
        total += fraction;
    }
    assert!(
        (0.5..=1.0 + 1e-9).contains(&total),
        "dispatch fractions should sum to 1 minus overflow, got {total}"
    );
}

#[test]
fn defaults_run_without_a_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("defaults");
    let out = run(&["stats", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out_dir.join("stats.csv").exists());
}
