//! The four lab commands. Each takes a validated [`RunConfig`] whose
//! `out_dir` it owns, writes its artifacts there and returns a summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use flashgrpo_core::grpo::{build_loss, collect_groups, MetricsRecord, Method, RolloutGroup, Trainer};
use flashgrpo_core::model::{fm_pretrain, VectorFieldParams};
use flashgrpo_core::oracle::{
    base_reward_std, check_grad_identity, finite_difference_suite, marginal_preservation, variance_decomposition,
    GradIdentityConfig, VerificationReport,
};
use flashgrpo_core::rng::derive;
use flashgrpo_core::{Clock, Error as CoreError};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::metrics::{coefficient_of_variation, write_comparison, write_loss_csv, ComparisonRow, JsonlWriter};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FINAL_CHECKPOINT_FILE: &str = "final.bin";
pub const FAILURE_CHECKPOINT_FILE: &str = "failure_state.bin";
pub const LOSS_CSV: &str = "pretrain_loss.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const VERIFY_JSON: &str = "verify.json";
pub const VERIFY_TEXT: &str = "verify.txt";
pub const COMPARISON_CSV: &str = "comparison.csv";

const DOMAIN_PRETRAIN: u64 = 10;
const DOMAIN_VERIFY: u64 = 11;

/// Wall clock measured from construction.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    cfg.echo(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

/// Loads a checkpoint and checks that it fits the configured architecture.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<checkpoint::Loaded> {
    let loaded = checkpoint::load(path)?;
    let want = cfg.arch();
    if *loaded.params.arch() != want {
        return Err(LabError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("architecture {:?} does not match the config's {:?}", loaded.params.arch(), want),
        });
    }
    Ok(loaded)
}

fn required<'a>(checkpoint: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    checkpoint.ok_or_else(|| LabError::field("checkpoint", format!("`{command}` needs --checkpoint")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub iterations: usize,
    pub final_loss: f64,
    pub loss_threshold: f64,
    pub below_threshold: bool,
}

/// Flow-matching pretraining, from the configured initialization or from
/// `checkpoint` when given.
pub fn pretrain(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PretrainSummary> {
    let dir = prepare_out(cfg)?;
    let start = match checkpoint {
        Some(p) => load_checkpoint(cfg, p)?.params,
        None => VectorFieldParams::init(cfg.seed, cfg.arch())?,
    };
    let mut rng = derive(cfg.seed, DOMAIN_PRETRAIN, 0);
    let out = fm_pretrain(&start, &cfg.data, &cfg.pretrain, &mut rng)?;
    write_loss_csv(&dir.join(LOSS_CSV), &out.losses)?;
    let path = dir.join(CHECKPOINT_FILE);
    let sha256 = checkpoint::save(&path, &out.params)?;
    let summary = PretrainSummary {
        checkpoint: path,
        sha256,
        iterations: cfg.pretrain.iterations,
        final_loss: out.final_loss,
        loss_threshold: cfg.pretrain.loss_threshold,
        below_threshold: out.below_threshold,
    };
    write_json(&dir.join("pretrain_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub method: Method,
    pub iterations: usize,
    pub start_sha256: String,
    pub final_sha256: String,
    pub final_eval_reward: Option<f64>,
    pub grad_norm_cv: f64,
    pub backward_passes: u64,
    pub wall_ms: f64,
}

#[derive(Serialize)]
struct TrajectoryDump<'a> {
    iter: usize,
    groups: &'a [RolloutGroup],
}

#[derive(Serialize)]
struct FailureReport<'a> {
    iteration: usize,
    error: String,
    state_checkpoint: &'a Path,
}

/// Runs one alignment into `dir`. On an error the metrics written so far
/// stay on disk and the parameters at the time of failure are dumped next
/// to them.
fn run_alignment(
    cfg: &RunConfig,
    method: Method,
    start: VectorFieldParams,
    start_sha: &str,
    dir: &Path,
) -> Result<(AlignSummary, Vec<MetricsRecord>)> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let align = flashgrpo_core::grpo::AlignConfig {
        method,
        ..cfg.align.clone()
    };
    let mut trainer = Trainer::new(start, align, cfg.noise_schedule()?, cfg.reward_spec(), cfg.seed)?;
    let mut metrics = JsonlWriter::create(&dir.join(METRICS_FILE))?;
    let mut dump = if cfg.output.dump_trajectories {
        Some(JsonlWriter::create(&dir.join(TRAJECTORIES_FILE))?)
    } else {
        None
    };
    let clock = SystemClock::default();
    let mut records = Vec::with_capacity(cfg.align.iterations);
    while trainer.iteration() < cfg.align.iterations {
        let (record, groups) = match trainer.step_with_groups(&clock) {
            Ok(v) => v,
            Err(e) => {
                let state = dir.join(FAILURE_CHECKPOINT_FILE);
                checkpoint::save(&state, trainer.params())?;
                write_json(
                    &dir.join("failure.json"),
                    &FailureReport {
                        iteration: trainer.iteration(),
                        error: e.to_string(),
                        state_checkpoint: &state,
                    },
                )?;
                log::error!("{method} aborted at iteration {}: {e}", trainer.iteration());
                return Err(e.into());
            }
        };
        metrics.write(&record)?;
        if let Some(d) = dump.as_mut() {
            d.write(&TrajectoryDump {
                iter: record.iter,
                groups: &groups,
            })?;
        }
        records.push(record);
    }
    let final_sha256 = checkpoint::save(&dir.join(FINAL_CHECKPOINT_FILE), trainer.params())?;
    let grad_norms: Vec<f64> = records.iter().map(|r| r.grad_norm).collect();
    let summary = AlignSummary {
        method,
        iterations: records.len(),
        start_sha256: start_sha.to_string(),
        final_sha256,
        final_eval_reward: records.iter().rev().find_map(|r| r.eval_reward),
        grad_norm_cv: if grad_norms.is_empty() { 0.0 } else { coefficient_of_variation(&grad_norms) },
        backward_passes: trainer.backward_passes(),
        wall_ms: records.iter().map(|r| r.wall_ms).sum(),
    };
    write_json(&dir.join("align_summary.json"), &summary)?;
    Ok((summary, records))
}

/// GRPO alignment of a pretrained checkpoint with the configured method.
pub fn align(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<AlignSummary> {
    let dir = prepare_out(cfg)?;
    let loaded = load_checkpoint(cfg, required(checkpoint, "align")?)?;
    Ok(run_alignment(cfg, cfg.align.method, loaded.params, &loaded.sha256, &dir)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub checkpoint_sha256: String,
    pub runs: Vec<AlignSummary>,
    pub comparison_csv: PathBuf,
}

/// Runs every listed method from the same checkpoint and seed, each into
/// its own subdirectory, and merges the per-iteration metrics.
pub fn compare(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<CompareSummary> {
    let dir = prepare_out(cfg)?;
    let loaded = load_checkpoint(cfg, required(checkpoint, "compare")?)?;
    let mut runs = Vec::new();
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for &method in &cfg.compare.methods {
        log::info!("compare: running {method}");
        let (summary, records) =
            run_alignment(cfg, method, loaded.params.clone(), &loaded.sha256, &dir.join(method.name()))?;
        rows.extend(records.iter().map(ComparisonRow::from));
        runs.push(summary);
    }
    let csv_path = dir.join(COMPARISON_CSV);
    write_comparison(&csv_path, &loaded.sha256, &rows)?;
    let summary = CompareSummary {
        checkpoint_sha256: loaded.sha256,
        runs,
        comparison_csv: csv_path,
    };
    write_json(&dir.join("compare_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub reports: Vec<VerificationReport>,
    /// Checks that need a pretrained checkpoint and were not run.
    pub skipped: Vec<String>,
}

impl VerifySummary {
    pub fn failed(&self) -> usize {
        self.reports.iter().filter(|r| !r.passed).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.reports {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            s += &format!("{tag} {:<28} statistic={:.6e} threshold={:.6e}\n", r.name, r.statistic, r.threshold);
        }
        for name in &self.skipped {
            s += &format!("SKIP {name} (needs --checkpoint)\n");
        }
        s += &format!(
            "{}: {} of {} checks passed\n",
            if self.passed { "OK" } else { "FAILED" },
            self.reports.len() - self.failed(),
            self.reports.len()
        );
        s
    }
}

/// Transition-kernel gradient evaluations of one backward pass over a
/// single prompt group, for each method with a fixed per-group cost.
pub fn kernel_eval_counts(
    params: &VectorFieldParams,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<(Method, u64, u64)>> {
    let schedule = cfg.noise_schedule()?;
    let reward = cfg.reward_spec();
    let g = cfg.align.group_size as u64;
    let t = schedule.steps() as u64;
    let one_group = flashgrpo_core::grpo::AlignConfig {
        batch_prompts: 1,
        ..cfg.align.clone()
    };
    let mut out = Vec::new();
    for (method, expected) in [
        (Method::Flash, g),
        (Method::FlowgrpoFull, g * t),
        (Method::FlowgrpoHalf, g * (t / 2)),
    ] {
        let mut rng = derive(seed, DOMAIN_VERIFY, 1);
        let groups = collect_groups(params, method, &one_group, &schedule, &reward, 0, &mut rng)?;
        let loss = build_loss(params, &groups, method, &schedule, &one_group.loss_settings(), None)?;
        let counted = loss.backward()?.kernel_evals();
        out.push((method, counted, expected));
    }
    Ok(out)
}

/// Runs the oracle suite. Model-dependent checks use `checkpoint` when
/// given and a fresh initialization otherwise; the marginal test only runs
/// on a checkpoint.
pub fn verify(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<VerifySummary> {
    let dir = prepare_out(cfg)?;
    let v = &cfg.verify;
    let schedule = cfg.noise_schedule()?;
    let loaded = checkpoint.map(|p| load_checkpoint(cfg, p)).transpose()?;
    let params = match &loaded {
        Some(l) => l.params.clone(),
        None => VectorFieldParams::init(cfg.seed, cfg.arch())?,
    };
    let mut reports = finite_difference_suite(cfg.seed, v.fd_step, v.fd_tolerance)?;

    let identity = GradIdentityConfig {
        trials: v.identity_trials,
        cfg_scale: cfg.align.cfg_scale,
        tolerance: v.identity_tolerance,
        lambda_fault: if v.lambda_fault { 2.0 } else { 1.0 },
        ..GradIdentityConfig::default()
    };
    reports.push(check_grad_identity(&params, &schedule, &identity, &mut derive(cfg.seed, DOMAIN_VERIFY, 2))?);

    let counts = kernel_eval_counts(&params, cfg, cfg.seed)?;
    let exact = counts.iter().all(|(_, c, e)| c == e);
    let mut report = VerificationReport::new("kernel_eval_counts", exact, counts[0].1 as f64, counts[0].2 as f64)
        .with("group_size", cfg.align.group_size as f64);
    for (m, c, e) in &counts {
        report = report.with(&format!("{m}_counted"), *c as f64).with(&format!("{m}_expected"), *e as f64);
    }
    reports.push(report);

    let reward = cfg.reward_spec();
    let mut rng = derive(cfg.seed, DOMAIN_VERIFY, 3);
    let spread = base_reward_std(&params, &reward, &schedule, 2000, cfg.align.cfg_scale, &mut rng)?;
    let probe = reward.clone().with_probe(v.probe_ratio * spread);
    reports.push(
        variance_decomposition(
            &params,
            &probe,
            &schedule,
            cfg.align.group_size,
            v.variance_groups,
            cfg.align.cfg_scale,
            &mut rng,
        )?
        .with("base_reward_std", spread)
        .with("probe_amplitude", v.probe_ratio * spread),
    );

    let mut skipped = Vec::new();
    if loaded.is_some() {
        let mut rng = derive(cfg.seed, DOMAIN_VERIFY, 4);
        reports.push(marginal_preservation(
            &params,
            &schedule,
            v.energy_samples,
            v.energy_permutations,
            v.alpha,
            v.marginal_cfg_scale,
            &mut rng,
        )?);
    } else {
        skipped.push("marginal_preservation".to_string());
    }

    let summary = VerifySummary {
        passed: reports.iter().all(|r| r.passed),
        reports,
        skipped,
    };
    write_json(&dir.join(VERIFY_JSON), &summary)?;
    std::fs::write(dir.join(VERIFY_TEXT), summary.to_text()).map_err(|e| LabError::io(dir.join(VERIFY_TEXT), e))?;
    Ok(summary)
}

/// True when the error came from a NaN or infinite value during training.
pub fn is_non_finite(e: &LabError) -> bool {
    matches!(e, LabError::Core(CoreError::NonFinite(_)))
}
