use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flashgrpo_core::grpo::{MetricsRecord, Method};
use flashgrpo_core::model::{Arch, VectorFieldParams};
use flashgrpo_lab::checkpoint;
use flashgrpo_lab::commands::{VerifySummary, CHECKPOINT_FILE, COMPARISON_CSV, METRICS_FILE, VERIFY_JSON};
use flashgrpo_lab::config::{RunConfig, EFFECTIVE_CONFIG};
use flashgrpo_lab::metrics::{read_comparison, read_loss_csv, read_metrics, ComparisonRow};

const SMALL: &str = r#"
seed = 3
[pretrain]
iterations = 40
batch_size = 32
[align]
iterations = 6
eval_every = 3
eval_per_class = 16
eval_steps = 10
[verify]
variance_groups = 200
energy_samples = 256
energy_permutations = 50
"#;

fn flashgrpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashgrpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = flashgrpo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Pretrains with `config` into `dir/pre` and returns the checkpoint path.
fn pretrained(dir: &Path, config: &Path) -> PathBuf {
    let out = dir.join("pre");
    run_ok(&["pretrain", "--config", p(config), "--out", p(&out)]);
    out.join(CHECKPOINT_FILE)
}

fn without_wall(mut r: Vec<MetricsRecord>) -> Vec<MetricsRecord> {
    for m in &mut r {
        m.wall_ms = 0.0;
    }
    r
}

#[test]
fn pretrain_with_zero_iterations_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 11\n[pretrain]\niterations = 0\n");
    let ckpt = pretrained(dir.path(), &cfg);
    let loaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.params, VectorFieldParams::init(11, Arch::default()).unwrap());
    assert!(read_loss_csv(&dir.path().join("pre/pretrain_loss.csv")).unwrap().is_empty());
}

#[test]
fn pretrain_is_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["pretrain", "--config", p(&cfg), "--out", p(&a)]);
    run_ok(&["pretrain", "--config", p(&cfg), "--out", p(&b)]);
    let bytes = |d: &Path| std::fs::read(d.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(read_loss_csv(&a.join("pretrain_loss.csv")).unwrap().len(), 40);

    let echoed = RunConfig::load(&a.join(EFFECTIVE_CONFIG)).unwrap();
    let mut expected = RunConfig::parse(SMALL).unwrap();
    expected.out_dir = a.clone();
    assert_eq!(echoed, expected);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[pretrain]\niterations = 0\n");
    let out = dir.path().join("o");
    run_ok(&["pretrain", "--config", p(&cfg), "--out", p(&out), "--seed", "5"]);
    let loaded = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.params.seed(), 5);
    assert_eq!(RunConfig::load(&out.join(EFFECTIVE_CONFIG)).unwrap().seed, 5);
}

#[test]
fn invalid_configs_exit_nonzero_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("[align]\ngroup_size = 1\n", "align.group_size"),
        ("[schedule]\nnoise_scale = -1.0\n", "schedule.noise_scale"),
        ("[align]\nlearnig_rate = 0.1\n", "learnig_rate"),
    ] {
        let cfg = write_config(dir.path(), text);
        let out = flashgrpo(&["pretrain", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{text}: {err}");
        assert!(!dir.path().join("x").join(CHECKPOINT_FILE).exists());
    }
}

#[test]
fn align_needs_a_matching_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = flashgrpo(&["align", "--config", p(&cfg), "--out", p(&dir.path().join("a"))]);
    assert!(!out.status.success());

    let wide = write_config(dir.path(), "[pretrain]\niterations = 0\n[model]\nwidth = 16\n");
    let ckpt = pretrained(dir.path(), &wide);
    let cfg = write_config(dir.path(), SMALL);
    let out = flashgrpo(&["align", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&dir.path().join("a"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));
}

#[test]
fn align_writes_reproducible_metrics_and_a_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[output]\ndump_trajectories = true\n"));
    let ckpt = pretrained(dir.path(), &cfg);
    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        run_ok(&["align", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(out)]);
    }
    let a = read_metrics(&runs[0].join(METRICS_FILE)).unwrap();
    let b = read_metrics(&runs[1].join(METRICS_FILE)).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(without_wall(a.clone()), without_wall(b));
    assert!(a.iter().all(|r| r.method == Method::Flash && r.wall_ms > 0.0));
    let evals: Vec<usize> = a.iter().filter(|r| r.eval_reward.is_some()).map(|r| r.iter).collect();
    assert_eq!(evals, vec![0, 3, 5]);
    assert_eq!(a.last().unwrap().backward_passes_cumulative, 6 * 4 * 8);

    let final_a = std::fs::read(runs[0].join("final.bin")).unwrap();
    assert_eq!(final_a, std::fs::read(runs[1].join("final.bin")).unwrap());
    assert_ne!(final_a, std::fs::read(&ckpt).unwrap());
    let dumped = std::fs::read_to_string(runs[0].join("trajectories.jsonl")).unwrap();
    assert_eq!(dumped.lines().count(), 6);
}

#[test]
fn non_finite_training_aborts_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ckpt = pretrained(dir.path(), &cfg);
    let bad = write_config(
        dir.path(),
        &SMALL
            .replace("iterations = 6", "iterations = 6\nlr = 1e300")
            .replace("eval_every = 3", "eval_every = 0"),
    );
    let out_dir = dir.path().join("bad");
    let out = flashgrpo(&["align", "--config", p(&bad), "--checkpoint", p(&ckpt), "--out", p(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let prefix = read_metrics(&out_dir.join(METRICS_FILE)).unwrap();
    assert!(!prefix.is_empty() && prefix.len() < 6);
    assert!(out_dir.join("failure.json").exists());
    checkpoint::load(&out_dir.join("failure_state.bin")).unwrap();
}

#[test]
fn verify_passes_on_a_fresh_model_and_fails_with_a_lambda_fault() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let good = dir.path().join("good");
    let out = run_ok(&["verify", "--config", p(&cfg), "--out", p(&good)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("grad_identity"));
    let text = std::fs::read_to_string(good.join(VERIFY_JSON)).unwrap();
    let summary: VerifySummary = serde_json::from_str(&text).unwrap();
    assert!(summary.passed);
    assert_eq!(summary.skipped, vec!["marginal_preservation".to_string()]);
    for name in ["grad_identity", "kernel_eval_counts", "variance_decomposition"] {
        assert!(summary.reports.iter().any(|r| r.name == name && r.passed), "{name}");
    }

    let bad = dir.path().join("bad");
    let out = flashgrpo(&["verify", "--config", p(&cfg), "--out", p(&bad), "--lambda-fault"]);
    assert_eq!(out.status.code(), Some(3));
    let summary: VerifySummary = serde_json::from_str(&std::fs::read_to_string(bad.join(VERIFY_JSON)).unwrap()).unwrap();
    assert!(!summary.passed);
    assert!(summary.reports.iter().any(|r| r.name == "grad_identity" && !r.passed));
}

#[test]
fn verify_with_checkpoint_runs_the_marginal_test() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ckpt = pretrained(dir.path(), &cfg);
    let out_dir = dir.path().join("v");
    // a barely trained model need not pass; the check must be present
    let _ = flashgrpo(&["verify", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&out_dir)]);
    let summary: VerifySummary =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join(VERIFY_JSON)).unwrap()).unwrap();
    assert!(summary.skipped.is_empty());
    assert!(summary.reports.iter().any(|r| r.name == "marginal_preservation"));
}

#[test]
fn compare_with_one_method_reproduces_that_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[compare]\nmethods = [\"flash\"]\n"));
    let ckpt = pretrained(dir.path(), &cfg);
    let out_dir = dir.path().join("cmp");
    run_ok(&["compare", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&out_dir)]);
    let (sha, rows) = read_comparison(&out_dir.join(COMPARISON_CSV)).unwrap();
    assert_eq!(sha, checkpoint::sha256_hex(&std::fs::read(&ckpt).unwrap()));
    let metrics = read_metrics(&out_dir.join("flash").join(METRICS_FILE)).unwrap();
    let expected: Vec<ComparisonRow> = metrics.iter().map(ComparisonRow::from).collect();
    assert_eq!(rows, expected);

    let header = std::fs::read_to_string(out_dir.join(COMPARISON_CSV)).unwrap();
    assert_eq!(header.lines().nth(1), Some("iteration,wall_ms,method,mean_reward,grad_norm"));
}

#[test]
fn compare_runs_every_method_from_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\n[compare]\nmethods = [\"flash\", \"fast1\", \"flowgrpo-half\"]\n"),
    );
    let ckpt = pretrained(dir.path(), &cfg);
    let out_dir = dir.path().join("cmp");
    run_ok(&["compare", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&out_dir)]);
    let (_, rows) = read_comparison(&out_dir.join(COMPARISON_CSV)).unwrap();
    assert_eq!(rows.len(), 18);
    for m in [Method::Flash, Method::Fast1, Method::FlowgrpoHalf] {
        let its: Vec<usize> = rows.iter().filter(|r| r.method == m).map(|r| r.iteration).collect();
        assert_eq!(its, (0..6).collect::<Vec<_>>());
        assert!(out_dir.join(m.name()).join("final.bin").exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("compare_summary.json")).unwrap()).unwrap();
    let sha = summary["checkpoint_sha256"].as_str().unwrap();
    for run in summary["runs"].as_array().unwrap() {
        assert_eq!(run["start_sha256"].as_str().unwrap(), sha);
    }
}
