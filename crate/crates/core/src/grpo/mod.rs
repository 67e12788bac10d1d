//! Group-relative policy optimization for flow-matching samplers.
//!
//! Three training methods share the machinery here:
//!
//! * **Flash**: every rollout of a prompt group takes its single stochastic
//!   transition at the same timestep `k` (iso-temporal grouping), timesteps
//!   are stratified across the prompts of a batch, and each group's
//!   advantages are divided by `lambda(t_k)` before entering the clipped
//!   surrogate (temporal gradient rectification).
//! * **Flow-GRPO**: stochastic transitions at every step (or the first
//!   half), with the surrogate averaged over all of them.
//! * **Fast1**: one stochastic transition per rollout at an independently
//!   drawn timestep, no rectification.

mod loss;
mod trainer;

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Result};
use crate::model::Cond;
use crate::rewards::{evaluate_group, RewardSpec};
use crate::sampler::{BaselineMode, Trajectory};
use crate::schedule::NoiseSchedule;

pub use loss::{fast1_loss, flash_loss, flowgrpo_loss, LossGraph, LossSettings};
pub use trainer::{
    build_loss, collect_groups, evaluate_reward, train_step, AlignConfig, MetricsRecord, StepOutcome, Trainer,
};

/// Reward spreads below this are treated as a degenerate group.
pub const DEGENERATE_STD: f64 = 1e-8;
/// Largest exponent accepted by [`policy_ratio`].
pub const RATIO_EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Method {
    Flash,
    FlowgrpoFull,
    FlowgrpoHalf,
    Fast1,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Flash, Method::FlowgrpoFull, Method::FlowgrpoHalf, Method::Fast1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Flash => "flash",
            Method::FlowgrpoFull => "flowgrpo-full",
            Method::FlowgrpoHalf => "flowgrpo-half",
            Method::Fast1 => "fast1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::Config(alloc::format!("unknown method {:?}", s)))
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// How Fast1 places its per-rollout timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TimestepSampling {
    /// Independent uniform draw per rollout.
    #[default]
    Random,
    /// Deterministic window sliding with the iteration counter.
    Sliding,
}

/// Timestep assignment for a batch of prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimestepAssignment {
    /// One transition index per prompt, shared by the whole group.
    Iso(Vec<usize>),
    /// One transition index per rollout.
    PerRollout(Vec<Vec<usize>>),
}

/// Stratified iso-temporal assignment: the eligible indices are split into
/// `b` contiguous near-equal strata, one index is drawn uniformly in each,
/// and the strata are shuffled across prompts.
pub fn assign_timesteps_iso<R: Rng + ?Sized>(b: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<usize>> {
    let e = schedule.eligible_count();
    if b == 0 {
        bail!(Config, "batch needs at least one prompt");
    }
    if b > e {
        bail!(Config, "{} prompts exceed the {} eligible timesteps", b, e);
    }
    let first = *schedule.eligible().start();
    let mut out: Vec<usize> = (0..b)
        .map(|j| {
            let lo = j * e / b;
            let hi = (j + 1) * e / b;
            first + rng.random_range(lo..hi)
        })
        .collect();
    out.shuffle(rng);
    Ok(out)
}

/// Naive assignment: every rollout draws its own uniform index.
pub fn assign_timesteps_naive<R: Rng + ?Sized>(
    b: usize,
    g: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if b == 0 || g == 0 {
        bail!(Config, "need at least one prompt and one rollout");
    }
    Ok((0..b)
        .map(|_| (0..g).map(|_| rng.random_range(schedule.eligible())).collect())
        .collect())
}

/// Sliding-window assignment: consecutive rollouts take consecutive
/// indices, with the window origin advancing each iteration.
pub fn assign_timesteps_sliding(b: usize, g: usize, schedule: &NoiseSchedule, iteration: u64) -> Vec<Vec<usize>> {
    let e = schedule.eligible_count() as u64;
    let first = *schedule.eligible().start() as u64;
    (0..b as u64)
        .map(|p| {
            (0..g as u64)
                .map(|i| (first + (iteration * (b * g) as u64 + p * g as u64 + i) % e) as usize)
                .collect()
        })
        .collect()
}

/// Group-normalized advantages `(R - mean) / (std + std_floor)` using the
/// population standard deviation. Groups whose spread is below
/// [`DEGENERATE_STD`] get all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        bail!(Contract, "advantages need a group of at least 2, got {}", rewards.len());
    }
    if !(std_floor >= 0.0) {
        bail!(Config, "std_floor must be non-negative, got {}", std_floor);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std < DEGENERATE_STD {
        return Ok(alloc::vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + std_floor)).collect())
}

/// `exp(logp_new - logp_old)` with the exponent clamped to `±30`.
pub fn policy_ratio(logp_new: f64, logp_old: f64) -> f64 {
    let d = logp_new - logp_old;
    if d.abs() > RATIO_EXP_CLAMP {
        log::warn!("policy log-ratio {} clamped to ±{}", d, RATIO_EXP_CLAMP);
    }
    libm::exp(d.clamp(-RATIO_EXP_CLAMP, RATIO_EXP_CLAMP))
}

pub fn clip_ratio(ratio: f64, eps_clip: f64) -> f64 {
    ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip)
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps_clip: f64) -> f64 {
    (ratio * adv).min(clip_ratio(ratio, eps_clip) * adv)
}

/// Per-sample Monte Carlo KL surrogate `beta * (logp_new - logp_ref)`.
pub fn kl_penalty(logp_new: f64, logp_ref: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    beta * (logp_new - logp_ref)
}

/// Where the stochastic transitions of a group sit.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GroupTimesteps {
    Iso(usize),
    PerRollout(Vec<usize>),
    Trajectory(BaselineMode),
}

/// `G` rollouts of one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RolloutGroup {
    pub cond: Cond,
    pub timesteps: GroupTimesteps,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(cond: Cond, timesteps: GroupTimesteps, trajectories: Vec<Trajectory>) -> Self {
        Self {
            cond,
            timesteps,
            trajectories,
            rewards: Vec::new(),
            advantages: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Fills rewards and advantages.
    pub fn score(&mut self, reward: &RewardSpec, std_floor: f64) -> Result<()> {
        self.rewards = evaluate_group(reward, &self.trajectories)?;
        self.advantages = compute_advantages(&self.rewards, std_floor)?;
        Ok(())
    }
}
