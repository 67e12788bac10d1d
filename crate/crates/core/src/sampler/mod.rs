//! ODE, SDE and mixed rollouts.
//!
//! Sign convention: states move from high `t` to low `t` with a positive
//! step size `dt`, so the deterministic update is `x - v dt` and the
//! stochastic update is
//!
//! ```text
//! x_next = x - dt * [v + sigma^2/(2t) * (x + (1 - t) v)] + sigma * sqrt(dt) * eps
//! ```
//!
//! Every velocity used here is the classifier-free-guided one.

mod graph;

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{bail, Result};
use crate::model::{velocity_rows, Cond, VectorFieldParams};
use crate::rng::normal_vec;
use crate::schedule::NoiseSchedule;

pub use graph::{cfg_velocity_graph, log_prob_graph, transition_mean_graph, KernelRows};

/// Which transitions of a rollout are stochastic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SdePlan {
    /// Pure ODE.
    Ode,
    /// One SDE transition at index `k`.
    Single(usize),
    /// SDE at every transition.
    Full,
    /// SDE at the `T/2` highest-noise transitions.
    FirstHalf,
}

impl SdePlan {
    pub fn is_sde(&self, k: usize, schedule: &NoiseSchedule) -> bool {
        match *self {
            SdePlan::Ode => false,
            SdePlan::Single(j) => j == k,
            SdePlan::Full => true,
            SdePlan::FirstHalf => schedule.first_half().contains(&k),
        }
    }

    pub fn sde_steps(&self, schedule: &NoiseSchedule) -> usize {
        schedule.eligible().filter(|&k| self.is_sde(k, schedule)).count()
    }
}

/// Everything needed to re-evaluate one Gaussian transition later.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransitionRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub x_t: Vec<f64>,
    pub x_next: Vec<f64>,
    pub eps: Vec<f64>,
    /// Log-density of `x_next` under the rollout-time parameters.
    pub log_prob_old: f64,
}

/// One rollout from noise to a terminal sample.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub cond: Cond,
    pub initial_noise: Vec<f64>,
    /// `x_{t_T}, ..., x_{t_0}`: `T + 1` states.
    pub states: Vec<Vec<f64>>,
    pub plan: SdePlan,
    /// SDE records in sampling order (highest `t` first).
    pub records: Vec<TransitionRecord>,
    /// State after the final deterministic jump from `t_floor` to zero.
    pub final_sample: Vec<f64>,
}

impl Trajectory {
    pub fn record_at(&self, k: usize) -> Option<&TransitionRecord> {
        self.records.iter().find(|r| r.step == k)
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 0.0) || !scale.is_finite() {
        bail!(Config, "guidance scale must be finite and non-negative, got {}", scale);
    }
    Ok(())
}

/// Guided velocities `v_u + s (v_c - v_u)` for a batch of rows.
///
/// `s = 1` returns the conditional velocity and `s = 0` the unconditional
/// one, without evaluating the other branch.
pub fn cfg_velocity_rows(
    params: &VectorFieldParams,
    x: &[f64],
    t: &[f64],
    conds: &[Cond],
    scale: f64,
) -> Result<Vec<f64>> {
    check_scale(scale)?;
    if scale == 1.0 {
        return velocity_rows(params, x, t, conds);
    }
    let uncond: Vec<Cond> = alloc::vec![Cond::Uncond; conds.len()];
    if scale == 0.0 {
        return velocity_rows(params, x, t, &uncond);
    }
    let rows = t.len();
    let mut xx = Vec::with_capacity(2 * x.len());
    xx.extend_from_slice(x);
    xx.extend_from_slice(x);
    let mut tt = Vec::with_capacity(2 * rows);
    tt.extend_from_slice(t);
    tt.extend_from_slice(t);
    let mut cc = Vec::with_capacity(2 * rows);
    cc.extend_from_slice(conds);
    cc.extend_from_slice(&uncond);
    let both = velocity_rows(params, &xx, &tt, &cc)?;
    let (vc, vu) = both.split_at(x.len());
    Ok(vu.iter().zip(vc).map(|(u, c)| u + scale * (c - u)).collect())
}

pub fn cfg_velocity(params: &VectorFieldParams, x: &[f64], t: f64, c: Cond, scale: f64) -> Result<Vec<f64>> {
    cfg_velocity_rows(params, x, &[t], &[c], scale)
}

/// Deterministic Euler step `x - v dt`.
pub fn ode_step(params: &VectorFieldParams, x: &[f64], t: f64, dt: f64, c: Cond, scale: f64) -> Result<Vec<f64>> {
    let v = cfg_velocity(params, x, t, c, scale)?;
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi - vi * dt).collect())
}

/// Mean of the Gaussian transition given the velocity at `(x, t)`.
pub fn mean_from_velocity(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        bail!(Domain, "transition mean needs t > 0, got {}", t);
    }
    let k = sigma * sigma / (2.0 * t);
    let omt = 1.0 - t;
    Ok(x.iter()
        .zip(v)
        .map(|(&xi, &vi)| xi - (vi + (xi + vi * omt) * k) * dt)
        .collect())
}

pub fn transition_mean(
    params: &VectorFieldParams,
    x: &[f64],
    t: f64,
    dt: f64,
    c: Cond,
    sigma: f64,
    scale: f64,
) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        bail!(Domain, "transition mean needs t > 0, got {}", t);
    }
    let v = cfg_velocity(params, x, t, c, scale)?;
    mean_from_velocity(x, &v, t, dt, sigma)
}

/// `log N(x_next; mu, sigma^2 dt I)`.
pub fn transition_log_prob(mu: &[f64], sigma: f64, dt: f64, x_next: &[f64]) -> Result<f64> {
    let var = sigma * sigma * dt;
    if !(var > 0.0) || !var.is_finite() {
        bail!(Domain, "transition variance must be positive, got sigma={} dt={}", sigma, dt);
    }
    if mu.len() != x_next.len() {
        bail!(Dimension, "mean has {} values, sample {}", mu.len(), x_next.len());
    }
    let sq: f64 = x_next
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq * log_prob_coefficient(sigma, dt) + log_prob_offset(mu.len(), sigma, dt))
}

pub(crate) fn log_prob_coefficient(sigma: f64, dt: f64) -> f64 {
    -1.0 / (2.0 * sigma * sigma * dt)
}

pub(crate) fn log_prob_offset(dim: usize, sigma: f64, dt: f64) -> f64 {
    -0.5 * dim as f64 * libm::log(2.0 * PI * sigma * sigma * dt)
}

/// One Euler-Maruyama step with the given standard-normal draw.
#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    params: &VectorFieldParams,
    x: &[f64],
    t: f64,
    dt: f64,
    c: Cond,
    sigma: f64,
    eps: &[f64],
    scale: f64,
) -> Result<(Vec<f64>, f64)> {
    let mu = transition_mean(params, x, t, dt, c, sigma, scale)?;
    if eps.len() != mu.len() {
        bail!(Dimension, "noise has {} values, state {}", eps.len(), mu.len());
    }
    let std = sigma * libm::sqrt(dt);
    let next: Vec<f64> = mu.iter().zip(eps).map(|(m, e)| m + std * e).collect();
    let logp = transition_log_prob(&mu, sigma, dt, &next)?;
    Ok((next, logp))
}

/// Rolls out a batch of trajectories in lockstep, one guided velocity
/// evaluation per transition for all rows.
///
/// `draw_eps(dim)` supplies the standard-normal vector for every SDE
/// transition, called in row order at each step.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch_with(
    params: &VectorFieldParams,
    initial: &[Vec<f64>],
    conds: &[Cond],
    plans: &[SdePlan],
    schedule: &NoiseSchedule,
    scale: f64,
    draw_eps: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<Vec<Trajectory>> {
    let n = initial.len();
    if conds.len() != n || plans.len() != n {
        bail!(Dimension, "rollout batch of {} states with {} conditions and {} plans", n, conds.len(), plans.len());
    }
    let dim = params.arch().dim;
    for x in initial {
        if x.len() != dim {
            bail!(Dimension, "initial state has {} values, expected {}", x.len(), dim);
        }
    }
    for plan in plans {
        if let SdePlan::Single(k) = *plan {
            if !schedule.eligible().contains(&k) {
                bail!(Contract, "SDE step {} outside eligible range {:?}", k, schedule.eligible());
            }
        }
    }
    let steps = schedule.steps();
    let mut trajs: Vec<Trajectory> = (0..n)
        .map(|r| {
            let mut states = Vec::with_capacity(steps + 1);
            states.push(initial[r].clone());
            Trajectory {
                cond: conds[r],
                initial_noise: initial[r].clone(),
                states,
                plan: plans[r],
                records: Vec::new(),
                final_sample: Vec::new(),
            }
        })
        .collect();
    let mut x: Vec<f64> = initial.iter().flatten().copied().collect();
    for step in schedule.transitions() {
        let times = alloc::vec![step.t; n];
        let v = cfg_velocity_rows(params, &x, &times, conds, scale)?;
        for (r, traj) in trajs.iter_mut().enumerate() {
            let xr = &mut x[r * dim..(r + 1) * dim];
            let vr = &v[r * dim..(r + 1) * dim];
            if traj.plan.is_sde(step.index, schedule) {
                let eps = draw_eps(dim);
                let mu = mean_from_velocity(xr, vr, step.t, step.dt, step.sigma)?;
                let std = step.sigma * libm::sqrt(step.dt);
                let next: Vec<f64> = mu.iter().zip(&eps).map(|(m, e)| m + std * e).collect();
                let log_prob_old = transition_log_prob(&mu, step.sigma, step.dt, &next)?;
                traj.records.push(TransitionRecord {
                    step: step.index,
                    t: step.t,
                    dt: step.dt,
                    sigma: step.sigma,
                    lambda: step.lambda,
                    x_t: xr.to_vec(),
                    x_next: next.clone(),
                    eps,
                    log_prob_old,
                });
                xr.copy_from_slice(&next);
            } else {
                for (xi, vi) in xr.iter_mut().zip(vr) {
                    *xi -= vi * step.dt;
                }
            }
            traj.states.push(xr.to_vec());
        }
    }
    // final deterministic jump from t_floor to zero
    let floor = schedule.t_floor();
    let v = cfg_velocity_rows(params, &x, &alloc::vec![floor; n], conds, scale)?;
    for (r, traj) in trajs.iter_mut().enumerate() {
        let xr = &mut x[r * dim..(r + 1) * dim];
        for (xi, vi) in xr.iter_mut().zip(&v[r * dim..(r + 1) * dim]) {
            *xi -= vi * floor;
        }
        traj.final_sample = xr.to_vec();
        if traj.final_sample.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "rollout {} produced a non-finite sample", r);
        }
    }
    Ok(trajs)
}

pub fn rollout_batch<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    initial: &[Vec<f64>],
    conds: &[Cond],
    plans: &[SdePlan],
    schedule: &NoiseSchedule,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    rollout_batch_with(params, initial, conds, plans, schedule, scale, &mut |d| normal_vec(rng, d))
}

/// ODE everywhere except one SDE transition at `k`.
pub fn rollout_mixed<R: Rng + ?Sized>(
    params_old: &VectorFieldParams,
    x_init: &[f64],
    schedule: &NoiseSchedule,
    k: usize,
    c: Cond,
    scale: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !schedule.eligible().contains(&k) {
        bail!(Contract, "SDE step {} outside eligible range {:?}", k, schedule.eligible());
    }
    let mut out = rollout_batch(params_old, &[x_init.to_vec()], &[c], &[SdePlan::Single(k)], schedule, scale, rng)?;
    Ok(out.remove(0))
}

/// Trajectory-level baselines: SDE at every step or at the first half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BaselineMode {
    FullSde,
    FirstHalfSde,
}

impl BaselineMode {
    pub fn plan(self) -> SdePlan {
        match self {
            BaselineMode::FullSde => SdePlan::Full,
            BaselineMode::FirstHalfSde => SdePlan::FirstHalf,
        }
    }
}

pub fn rollout_baseline<R: Rng + ?Sized>(
    params_old: &VectorFieldParams,
    x_init: &[f64],
    schedule: &NoiseSchedule,
    mode: BaselineMode,
    c: Cond,
    scale: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut out = rollout_batch(params_old, &[x_init.to_vec()], &[c], &[mode.plan()], schedule, scale, rng)?;
    Ok(out.remove(0))
}

pub fn rollout_ode(
    params: &VectorFieldParams,
    x_init: &[f64],
    schedule: &NoiseSchedule,
    c: Cond,
    scale: f64,
) -> Result<Trajectory> {
    let mut out = rollout_batch_with(params, &[x_init.to_vec()], &[c], &[SdePlan::Ode], schedule, scale, &mut |_| {
        unreachable!("pure ODE rollouts draw no noise")
    })?;
    Ok(out.remove(0))
}

/// Terminal samples of a batch of rollouts.
pub fn terminal_samples<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    initial: &[Vec<f64>],
    conds: &[Cond],
    plan: SdePlan,
    schedule: &NoiseSchedule,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let plans = alloc::vec![plan; initial.len()];
    Ok(rollout_batch(params, initial, conds, &plans, schedule, scale, rng)?
        .into_iter()
        .map(|t| t.final_sample)
        .collect())
}

/// Recovers the standard-normal draw of a stored transition by recomputing
/// its mean under `params`.
pub fn solve_eps(params: &VectorFieldParams, cond: Cond, rec: &TransitionRecord, scale: f64) -> Result<Vec<f64>> {
    let mu = transition_mean(params, &rec.x_t, rec.t, rec.dt, cond, rec.sigma, scale)?;
    let std = rec.sigma * libm::sqrt(rec.dt);
    Ok(rec.x_next.iter().zip(&mu).map(|(x, m)| (x - m) / std).collect())
}

#[cfg(test)]
mod tests;
