use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flashgrpo_lab::commands;
use flashgrpo_lab::config::RunConfig;
use flashgrpo_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "flashgrpo", version, about = "Single-timestep GRPO alignment lab for flow-matching models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining; writes a checkpoint and a loss CSV.
    Pretrain(Common),
    /// GRPO alignment of a checkpoint; writes metrics JSONL and a final checkpoint.
    Align(Common),
    /// Runs the verification oracles; exits nonzero if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt the gradient-identity reference on purpose.
        #[arg(long)]
        lambda_fault: bool,
    },
    /// Runs every configured method from one checkpoint and merges the metrics.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            let s = commands::pretrain(&cfg, c.checkpoint.as_deref())?;
            println!(
                "pretrain: {} iterations, final loss {:.5} (threshold {}), checkpoint {} sha256={}",
                s.iterations,
                s.final_loss,
                s.loss_threshold,
                s.checkpoint.display(),
                s.sha256
            );
        }
        Command::Align(c) => {
            let cfg = c.resolve()?;
            let s = commands::align(&cfg, c.checkpoint.as_deref())?;
            println!(
                "align {}: {} iterations, final eval reward {}, grad-norm CV {:.4}, {} backward passes",
                s.method,
                s.iterations,
                s.final_eval_reward.map_or("n/a".into(), |r| format!("{r:.4}")),
                s.grad_norm_cv,
                s.backward_passes
            );
        }
        Command::Verify { common, lambda_fault } => {
            let mut cfg = common.resolve()?;
            cfg.verify.lambda_fault |= lambda_fault;
            let s = commands::verify(&cfg, common.checkpoint.as_deref())?;
            print!("{}", s.to_text());
            if !s.passed {
                return Err(LabError::VerificationFailed {
                    failed: s.failed(),
                    total: s.reports.len(),
                });
            }
        }
        Command::Compare(c) => {
            let cfg = c.resolve()?;
            let s = commands::compare(&cfg, c.checkpoint.as_deref())?;
            for r in &s.runs {
                println!(
                    "{:<14} iterations={} grad_norm_cv={:.4} final_eval={} wall_ms={:.1}",
                    r.method.name(),
                    r.iterations,
                    r.grad_norm_cv,
                    r.final_eval_reward.map_or("n/a".into(), |v| format!("{v:.4}")),
                    r.wall_ms
                );
            }
            println!("comparison: {}", s.comparison_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
