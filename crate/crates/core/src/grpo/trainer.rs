//! Rollout collection, the optimization step and the training loop.

use alloc::vec::Vec;

use rand::Rng;

use super::{
    assign_timesteps_iso, assign_timesteps_naive, assign_timesteps_sliding, fast1_loss, flash_loss, flowgrpo_loss,
    GroupTimesteps, LossGraph, LossSettings, Method, RolloutGroup, TimestepSampling,
};
use crate::diff::GradientSet;
use crate::error::{bail, Result};
use crate::model::{Cond, VectorFieldParams};
use crate::optim::{Adam, AdamConfig};
use crate::rewards::{reward, RewardSpec};
use crate::rng::{derive, normal_vec};
use crate::sampler::{rollout_batch, BaselineMode, SdePlan};
use crate::schedule::NoiseSchedule;
use crate::Clock;

const DOMAIN_ROLLOUT: u64 = 1;
const DOMAIN_EVAL: u64 = 2;

/// Settings of an alignment run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AlignConfig {
    pub method: Method,
    pub iterations: usize,
    /// Prompts per batch (`B`).
    pub batch_prompts: usize,
    /// Rollouts per prompt (`G`).
    pub group_size: usize,
    pub lr: f64,
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub cfg_scale: f64,
    pub std_floor: f64,
    pub timestep_sampling: TimestepSampling,
    /// Held-out evaluation every this many iterations (0 disables).
    pub eval_every: usize,
    pub eval_per_class: usize,
    pub eval_steps: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: Method::Flash,
            iterations: 300,
            batch_prompts: 4,
            group_size: 8,
            lr: 1e-4,
            eps_clip: 0.001,
            beta_kl: 0.0,
            cfg_scale: 4.5,
            std_floor: 0.0,
            timestep_sampling: TimestepSampling::Random,
            eval_every: 10,
            eval_per_class: 256,
            eval_steps: 50,
        }
    }
}

impl AlignConfig {
    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            eps_clip: self.eps_clip,
            beta_kl: self.beta_kl,
            cfg_scale: self.cfg_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_settings().validate()?;
        if self.batch_prompts == 0 {
            bail!(Config, "batch_prompts must be positive");
        }
        if self.group_size < 2 {
            bail!(Config, "group_size must be at least 2, got {}", self.group_size);
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "lr must be finite and non-negative, got {}", self.lr);
        }
        if !(self.std_floor >= 0.0) || !self.std_floor.is_finite() {
            bail!(Config, "std_floor must be finite and non-negative, got {}", self.std_floor);
        }
        if self.eval_every > 0 && (self.eval_per_class == 0 || self.eval_steps < 2) {
            bail!(Config, "evaluation needs eval_per_class > 0 and eval_steps >= 2");
        }
        Ok(())
    }
}

/// One JSONL line of training metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub iter: usize,
    pub method: Method,
    pub mean_reward: f64,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub eval_reward: Option<f64>,
    pub grad_norm: f64,
    pub loss: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub backward_passes_cumulative: u64,
    pub wall_ms: f64,
}

/// Result of a single optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub kernel_evals: u64,
    pub lambda_range: (f64, f64),
    pub clip_fraction: f64,
    pub grads: GradientSet,
}

/// Builds the loss of `method` over scored groups.
pub fn build_loss(
    params: &VectorFieldParams,
    groups: &[RolloutGroup],
    method: Method,
    schedule: &NoiseSchedule,
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<LossGraph> {
    match method {
        Method::Flash => flash_loss(params, groups, schedule, settings, reference),
        Method::FlowgrpoFull => flowgrpo_loss(params, groups, BaselineMode::FullSde, schedule, settings, reference),
        Method::FlowgrpoHalf => {
            flowgrpo_loss(params, groups, BaselineMode::FirstHalfSde, schedule, settings, reference)
        }
        Method::Fast1 => fast1_loss(params, groups, settings, reference),
    }
}

/// Builds the loss, runs one backward pass and applies one optimizer update.
/// On error the parameters are left untouched.
pub fn train_step(
    params: &mut VectorFieldParams,
    optimizer: &mut Adam,
    groups: &[RolloutGroup],
    method: Method,
    schedule: &NoiseSchedule,
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<StepOutcome> {
    let loss = build_loss(params, groups, method, schedule, settings, reference)?;
    let grads = loss.backward()?;
    optimizer.step(params, &grads)?;
    Ok(StepOutcome {
        loss: loss.value(),
        grad_norm: grads.l2_norm(),
        kernel_evals: grads.kernel_evals(),
        lambda_range: loss.lambda_range,
        clip_fraction: loss.clip_fraction,
        grads,
    })
}

/// Samples `B` prompts and `G` rollouts each with the SDE placement of
/// `method`, then scores them.
#[allow(clippy::too_many_arguments)]
pub fn collect_groups<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    method: Method,
    config: &AlignConfig,
    schedule: &NoiseSchedule,
    reward_spec: &RewardSpec,
    iteration: u64,
    rng: &mut R,
) -> Result<Vec<RolloutGroup>> {
    let (b, g) = (config.batch_prompts, config.group_size);
    let classes = params.arch().classes;
    let prompts: Vec<Cond> = (0..b).map(|_| Cond::Class(rng.random_range(0..classes))).collect();
    let timesteps: Vec<GroupTimesteps> = match method {
        Method::Flash => assign_timesteps_iso(b, schedule, rng)?
            .into_iter()
            .map(GroupTimesteps::Iso)
            .collect(),
        Method::FlowgrpoFull => alloc::vec![GroupTimesteps::Trajectory(BaselineMode::FullSde); b],
        Method::FlowgrpoHalf => alloc::vec![GroupTimesteps::Trajectory(BaselineMode::FirstHalfSde); b],
        Method::Fast1 => {
            let ks = match config.timestep_sampling {
                TimestepSampling::Random => assign_timesteps_naive(b, g, schedule, rng)?,
                TimestepSampling::Sliding => assign_timesteps_sliding(b, g, schedule, iteration),
            };
            ks.into_iter().map(GroupTimesteps::PerRollout).collect()
        }
    };
    let dim = params.arch().dim;
    let mut initial = Vec::with_capacity(b * g);
    let mut conds = Vec::with_capacity(b * g);
    let mut plans = Vec::with_capacity(b * g);
    for (p, ts) in prompts.iter().zip(&timesteps) {
        for i in 0..g {
            initial.push(normal_vec(rng, dim));
            conds.push(*p);
            plans.push(match ts {
                GroupTimesteps::Iso(k) => SdePlan::Single(*k),
                GroupTimesteps::PerRollout(ks) => SdePlan::Single(ks[i]),
                GroupTimesteps::Trajectory(mode) => mode.plan(),
            });
        }
    }
    let mut trajs = rollout_batch(params, &initial, &conds, &plans, schedule, config.cfg_scale, rng)?;
    let mut groups = Vec::with_capacity(b);
    for (p, ts) in prompts.into_iter().zip(timesteps).rev() {
        let members = trajs.split_off(trajs.len() - g);
        groups.push(RolloutGroup::new(p, ts, members));
    }
    groups.reverse();
    for group in &mut groups {
        group.score(reward_spec, config.std_floor)?;
    }
    Ok(groups)
}

/// Mean reward of pure-ODE samples, `per_class` for every class, using a
/// finer `steps`-step grid.
pub fn evaluate_reward<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    reward_spec: &RewardSpec,
    per_class: usize,
    steps: usize,
    t_floor: f64,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<f64> {
    let schedule = NoiseSchedule::new(steps, 1.0, t_floor.min(0.5 / steps as f64))?;
    let classes = params.arch().classes;
    let dim = params.arch().dim;
    let n = per_class * classes;
    let initial: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, dim)).collect();
    let conds: Vec<Cond> = (0..n).map(|i| Cond::Class(i / per_class)).collect();
    let plans = alloc::vec![SdePlan::Ode; n];
    let trajs = rollout_batch(params, &initial, &conds, &plans, &schedule, cfg_scale, rng)?;
    let mut total = 0.0;
    for (i, tr) in trajs.iter().enumerate() {
        total += reward(reward_spec, &tr.final_sample, i / per_class, 0.0)?;
    }
    Ok(total / n as f64)
}

/// Owns the state of one alignment run.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: VectorFieldParams,
    reference: Option<VectorFieldParams>,
    optimizer: Adam,
    schedule: NoiseSchedule,
    reward: RewardSpec,
    config: AlignConfig,
    seed: u64,
    iteration: usize,
    backward_passes: u64,
}

impl Trainer {
    pub fn new(
        params: VectorFieldParams,
        config: AlignConfig,
        schedule: NoiseSchedule,
        reward: RewardSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        reward.validate()?;
        if reward.targets.len() != params.arch().classes {
            bail!(Config, "reward has {} targets for {} classes", reward.targets.len(), params.arch().classes);
        }
        let reference = (config.beta_kl > 0.0).then(|| params.clone());
        let optimizer = Adam::new(AdamConfig::with_lr(config.lr), &params);
        Ok(Self {
            params,
            reference,
            optimizer,
            schedule,
            reward,
            config,
            seed,
            iteration: 0,
            backward_passes: 0,
        })
    }

    pub fn params(&self) -> &VectorFieldParams {
        &self.params
    }

    pub fn into_params(self) -> VectorFieldParams {
        self.params
    }

    pub fn config(&self) -> &AlignConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes
    }

    /// Rollouts of the next iteration, without updating anything.
    pub fn rollout(&self) -> Result<Vec<RolloutGroup>> {
        let mut rng = derive(self.seed, DOMAIN_ROLLOUT, self.iteration as u64);
        collect_groups(
            &self.params,
            self.config.method,
            &self.config,
            &self.schedule,
            &self.reward,
            self.iteration as u64,
            &mut rng,
        )
    }

    /// Held-out reward of the current parameters. The noise depends only on
    /// the run seed, so every evaluation uses the same prompts and noise.
    pub fn evaluate(&self) -> Result<f64> {
        let mut rng = derive(self.seed, DOMAIN_EVAL, 0);
        evaluate_reward(
            &self.params,
            &self.reward,
            self.config.eval_per_class,
            self.config.eval_steps,
            self.schedule.t_floor(),
            self.config.cfg_scale,
            &mut rng,
        )
    }

    /// One iteration: rollouts, loss, backward, update, and (on cadence)
    /// evaluation. `wall_ms` covers everything except the evaluation.
    pub fn step(&mut self, clock: &dyn Clock) -> Result<MetricsRecord> {
        Ok(self.step_with_groups(clock)?.0)
    }

    /// Like [`Trainer::step`], also returning the scored rollout groups.
    pub fn step_with_groups(&mut self, clock: &dyn Clock) -> Result<(MetricsRecord, Vec<RolloutGroup>)> {
        let start = clock.now_ms();
        let groups = self.rollout()?;
        let outcome = train_step(
            &mut self.params,
            &mut self.optimizer,
            &groups,
            self.config.method,
            &self.schedule,
            &self.config.loss_settings(),
            self.reference.as_ref(),
        )?;
        let wall_ms = clock.now_ms() - start;
        self.backward_passes += outcome.kernel_evals;
        let iter = self.iteration;
        self.iteration += 1;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let every = self.config.eval_every;
        let eval_reward = if every > 0 && (iter.is_multiple_of(every) || self.iteration == self.config.iterations) {
            Some(self.evaluate()?)
        } else {
            None
        };
        let record = MetricsRecord {
            iter,
            method: self.config.method,
            mean_reward,
            eval_reward,
            grad_norm: outcome.grad_norm,
            loss: outcome.loss,
            lambda_min: outcome.lambda_range.0,
            lambda_max: outcome.lambda_range.1,
            backward_passes_cumulative: self.backward_passes,
            wall_ms,
        };
        Ok((record, groups))
    }

    /// Runs the remaining iterations, passing each record to `sink`.
    pub fn run(
        &mut self,
        clock: &dyn Clock,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.iterations {
            let rec = self.step(clock)?;
            sink(&rec)?;
        }
        Ok(())
    }
}
