//! Clipped-surrogate losses over stored transitions.
//!
//! All three methods reduce to the same computation: a list of transitions,
//! each with an effective advantage and a weight, evaluated in one batched
//! graph. Which side of the `min` in the clipped surrogate is active is
//! decided from forward values when the graph is built; the clipped side is
//! constant in the parameters and enters the loss as a plain number.

use alloc::vec::Vec;

use super::{clip_ratio, policy_ratio, GroupTimesteps, RolloutGroup, RATIO_EXP_CLAMP};
use crate::diff::{GradientSet, Graph, NodeId, Tensor};
use crate::error::{bail, Result};
use crate::model::{Cond, VectorFieldParams};
use crate::sampler::{
    log_prob_graph, transition_log_prob, transition_mean, transition_mean_graph, BaselineMode, KernelRows,
    TransitionRecord,
};
use crate::schedule::NoiseSchedule;

/// Hyperparameters shared by every loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub cfg_scale: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            eps_clip: 0.2,
            beta_kl: 0.0,
            cfg_scale: 4.5,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            bail!(Config, "eps_clip must lie in (0, 1), got {}", self.eps_clip);
        }
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            bail!(Config, "beta_kl must be finite and non-negative, got {}", self.beta_kl);
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            bail!(Config, "cfg_scale must be finite and non-negative, got {}", self.cfg_scale);
        }
        Ok(())
    }
}

/// One independently differentiated piece of a loss: a graph whose scalar
/// output enters the total loss multiplied by `scale`.
#[derive(Debug, Clone)]
struct Block {
    graph: Graph,
    output: NodeId,
    scale: f64,
}

/// A built loss, ready for one backward pass.
///
/// The rectified loss is stored as one block per prompt group holding the
/// unrectified clipped surrogate, scaled by `1 / lambda(t_k)`. Because the
/// clipped surrogate is positively homogeneous in the advantage this equals
/// the surrogate of the rectified advantages, and the rectified gradient is
/// exactly the group gradient times `1 / lambda`.
#[derive(Debug, Clone)]
pub struct LossGraph {
    blocks: Vec<Block>,
    value: f64,
    /// Number of transitions in the loss.
    pub transitions: usize,
    /// Mean of the policy ratios.
    pub mean_ratio: f64,
    /// Fraction of transitions on the clipped branch.
    pub clip_fraction: f64,
    /// Smallest and largest `lambda` among the transitions.
    pub lambda_range: (f64, f64),
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Gradient of the loss. Each block is differentiated once; the
    /// kernel-evaluation count is the total over blocks.
    pub fn backward(&self) -> Result<GradientSet> {
        let mut total: Option<GradientSet> = None;
        for block in &self.blocks {
            let mut grads = block.graph.backward(block.output)?;
            if block.scale != 1.0 {
                grads.scale(block.scale);
            }
            match total.as_mut() {
                Some(t) => t.merge(grads)?,
                None => total = Some(grads),
            }
        }
        let grads = total.unwrap_or_default();
        if !grads.all_finite() {
            bail!(NonFinite, "loss gradient holds non-finite values");
        }
        Ok(grads)
    }
}

struct Row<'a> {
    rec: &'a TransitionRecord,
    cond: Cond,
    adv: f64,
    weight: f64,
}

fn log_prob_fast(params: &VectorFieldParams, row: &Row<'_>, scale: f64) -> Result<f64> {
    let r = row.rec;
    let mu = transition_mean(params, &r.x_t, r.t, r.dt, row.cond, r.sigma, scale)?;
    transition_log_prob(&mu, r.sigma, r.dt, &r.x_next)
}

#[derive(Default)]
struct Tally {
    rows: usize,
    ratio_sum: f64,
    clipped: usize,
    lambda_lo: f64,
    lambda_hi: f64,
}

/// Graph of `sum_rows -w A min(r, clip(r))` plus the KL term for one set
/// of rows. The KL coefficient is divided by `scale` so that the block,
/// once multiplied by `scale`, carries the plain KL penalty.
fn surrogate_block(
    params: &VectorFieldParams,
    rows: &[Row<'_>],
    scale: f64,
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
    tally: &mut Tally,
) -> Result<Block> {
    let n = rows.len();
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let mut kr = KernelRows::new(params.arch().dim);
    for row in rows {
        kr.push(row.rec, row.cond)?;
    }
    let mu = transition_mean_graph(&mut g, params, &nodes, &kr, settings.cfg_scale)?;
    let logp = log_prob_graph(&mut g, mu, &kr)?;
    g.record_kernel_evals(n as u64);

    let logp_new: Vec<f64> = g.value(logp).values().to_vec();
    let mut shift = Vec::with_capacity(n);
    let mut coeff = Vec::with_capacity(n);
    let mut constant = 0.0;
    for (row, &lp) in rows.iter().zip(&logp_new) {
        if !lp.is_finite() {
            bail!(NonFinite, "transition log-density is not finite");
        }
        let ratio = policy_ratio(lp, row.rec.log_prob_old);
        tally.ratio_sum += ratio;
        tally.lambda_lo = tally.lambda_lo.min(row.rec.lambda);
        tally.lambda_hi = tally.lambda_hi.max(row.rec.lambda);
        let unclipped = ratio * row.adv;
        let clip = clip_ratio(ratio, settings.eps_clip) * row.adv;
        let saturated = (lp - row.rec.log_prob_old).abs() > RATIO_EXP_CLAMP;
        if unclipped <= clip && !saturated {
            shift.push(row.rec.log_prob_old);
            coeff.push(-row.weight * row.adv);
        } else {
            if unclipped > clip {
                tally.clipped += 1;
            }
            // exp(lp - lp) = 1 keeps the node finite; the zero coefficient
            // removes it from the loss
            shift.push(lp);
            coeff.push(0.0);
            constant -= row.weight * unclipped.min(clip);
        }
    }
    tally.rows += n;
    let old = g.constant(Tensor::vector(shift));
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let coeff = g.constant(Tensor::vector(coeff));
    let weighted = g.mul(ratio, coeff)?;
    let mut total = g.sum(weighted);

    if let (Some(reference), true) = (reference, settings.beta_kl > 0.0) {
        let beta = settings.beta_kl / scale;
        let mut kl_coeff = Vec::with_capacity(n);
        for row in rows {
            let lp_ref = log_prob_fast(reference, row, settings.cfg_scale)?;
            constant -= row.weight * beta * lp_ref;
            kl_coeff.push(row.weight * beta);
        }
        let kc = g.constant(Tensor::vector(kl_coeff));
        let kl = g.mul(logp, kc)?;
        let kl = g.sum(kl);
        total = g.add(total, kl)?;
    }
    let output = g.shift(total, constant);
    Ok(Block { graph: g, output, scale })
}

/// Assembles the loss from `(rows, scale)` blocks.
fn surrogate_loss(
    params: &VectorFieldParams,
    blocks: &[(Vec<Row<'_>>, f64)],
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<LossGraph> {
    settings.validate()?;
    if blocks.iter().all(|(rows, _)| rows.is_empty()) {
        bail!(Contract, "loss over an empty set of transitions");
    }
    if settings.beta_kl > 0.0 && reference.is_none() {
        bail!(Config, "beta_kl > 0 needs reference parameters");
    }
    let mut tally = Tally {
        lambda_lo: f64::INFINITY,
        lambda_hi: f64::NEG_INFINITY,
        ..Tally::default()
    };
    let mut built = Vec::with_capacity(blocks.len());
    let mut value = 0.0;
    for (rows, scale) in blocks.iter().filter(|(rows, _)| !rows.is_empty()) {
        if !(*scale > 0.0) || !scale.is_finite() {
            bail!(Domain, "loss block scale must be positive, got {}", scale);
        }
        let block = surrogate_block(params, rows, *scale, settings, reference, &mut tally)?;
        value += block.scale * block.graph.value(block.output).item();
        built.push(block);
    }
    if !value.is_finite() {
        bail!(NonFinite, "loss is not finite");
    }
    Ok(LossGraph {
        blocks: built,
        value,
        transitions: tally.rows,
        mean_ratio: tally.ratio_sum / tally.rows as f64,
        clip_fraction: tally.clipped as f64 / tally.rows as f64,
        lambda_range: (tally.lambda_lo, tally.lambda_hi),
    })
}

fn check_scored(group: &RolloutGroup) -> Result<()> {
    if group.advantages.len() != group.size() {
        bail!(Contract, "group has {} advantages for {} rollouts", group.advantages.len(), group.size());
    }
    if group.size() == 0 {
        bail!(Contract, "empty rollout group");
    }
    Ok(())
}

/// Iso-temporal loss with rectified advantages `A / lambda(t_k)`, averaged
/// over the `G * B` transitions.
pub fn flash_loss(
    params: &VectorFieldParams,
    groups: &[RolloutGroup],
    schedule: &NoiseSchedule,
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<LossGraph> {
    let b = groups.len();
    let mut blocks = Vec::with_capacity(b);
    for group in groups {
        check_scored(group)?;
        let GroupTimesteps::Iso(k) = group.timesteps else {
            bail!(Contract, "flash loss needs iso-temporal groups, got {:?}", group.timesteps);
        };
        if !schedule.eligible().contains(&k) {
            bail!(Contract, "timestep {} outside eligible range", k);
        }
        let lambda = schedule.step(k).lambda;
        let w = 1.0 / (group.size() * b) as f64;
        let mut rows = Vec::with_capacity(group.size());
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let Some(rec) = traj.record_at(k) else {
                bail!(Contract, "rollout has no stochastic transition at step {}", k);
            };
            if traj.records.len() != 1 {
                bail!(Contract, "flash rollouts carry exactly one stochastic transition");
            }
            rows.push(Row {
                rec,
                cond: traj.cond,
                adv,
                weight: w,
            });
        }
        blocks.push((rows, 1.0 / lambda));
    }
    surrogate_loss(params, &blocks, settings, reference)
}

/// Trajectory-level loss averaged over every stochastic transition of every
/// rollout, with the raw group advantage on each.
pub fn flowgrpo_loss(
    params: &VectorFieldParams,
    groups: &[RolloutGroup],
    mode: BaselineMode,
    schedule: &NoiseSchedule,
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<LossGraph> {
    let b = groups.len();
    let t_sup = mode.plan().sde_steps(schedule);
    let mut rows = Vec::new();
    for group in groups {
        check_scored(group)?;
        if group.timesteps != GroupTimesteps::Trajectory(mode) {
            bail!(Contract, "loss mode {:?} does not match group {:?}", mode, group.timesteps);
        }
        let w = 1.0 / (group.size() * t_sup * b) as f64;
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            if traj.records.len() != t_sup {
                bail!(Contract, "rollout has {} stochastic transitions, mode needs {}", traj.records.len(), t_sup);
            }
            for rec in &traj.records {
                rows.push(Row {
                    rec,
                    cond: traj.cond,
                    adv,
                    weight: w,
                });
            }
        }
    }
    surrogate_loss(params, &[(rows, 1.0)], settings, reference)
}

/// One stochastic transition per rollout at its own timestep, raw
/// advantages.
pub fn fast1_loss(
    params: &VectorFieldParams,
    groups: &[RolloutGroup],
    settings: &LossSettings,
    reference: Option<&VectorFieldParams>,
) -> Result<LossGraph> {
    let b = groups.len();
    let mut rows = Vec::new();
    for group in groups {
        check_scored(group)?;
        let GroupTimesteps::PerRollout(ks) = &group.timesteps else {
            bail!(Contract, "fast1 loss needs per-rollout timesteps, got {:?}", group.timesteps);
        };
        if ks.len() != group.size() {
            bail!(Contract, "{} timesteps for {} rollouts", ks.len(), group.size());
        }
        let w = 1.0 / (group.size() * b) as f64;
        for ((traj, &adv), &k) in group.trajectories.iter().zip(&group.advantages).zip(ks) {
            let Some(rec) = traj.record_at(k) else {
                bail!(Contract, "rollout has no stochastic transition at step {}", k);
            };
            rows.push(Row {
                rec,
                cond: traj.cond,
                adv,
                weight: w,
            });
        }
    }
    surrogate_loss(params, &[(rows, 1.0)], settings, reference)
}
