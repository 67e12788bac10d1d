//! Monte Carlo comparison of within-group reward variance under naive and
//! iso-temporal timestep assignment.

use alloc::vec::Vec;

use rand::Rng;

use super::VerificationReport;
use crate::error::{bail, Result};
use crate::model::{Cond, VectorFieldParams};
use crate::rewards::{evaluate_group, RewardSpec};
use crate::rng::normal_vec;
use crate::sampler::{rollout_batch, SdePlan};
use crate::schedule::NoiseSchedule;

/// Groups rolled out per batched sampler call.
const CHUNK: usize = 64;

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Mean within-group reward variance of `n_groups` groups of size `g`.
/// `naive` draws one timestep per rollout, otherwise one per group.
#[allow(clippy::too_many_arguments)]
fn mean_group_variance<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    spec: &RewardSpec,
    schedule: &NoiseSchedule,
    g: usize,
    n_groups: usize,
    cfg_scale: f64,
    naive: bool,
    rng: &mut R,
) -> Result<f64> {
    let arch = *params.arch();
    let mut total = 0.0;
    let mut done = 0;
    while done < n_groups {
        let m = CHUNK.min(n_groups - done);
        let mut initial = Vec::with_capacity(m * g);
        let mut conds = Vec::with_capacity(m * g);
        let mut plans = Vec::with_capacity(m * g);
        for _ in 0..m {
            let c = Cond::Class(rng.random_range(0..arch.classes));
            let shared = rng.random_range(schedule.eligible());
            for _ in 0..g {
                initial.push(normal_vec(rng, arch.dim));
                conds.push(c);
                let k = if naive { rng.random_range(schedule.eligible()) } else { shared };
                plans.push(SdePlan::Single(k));
            }
        }
        let trajs = rollout_batch(params, &initial, &conds, &plans, schedule, cfg_scale, rng)?;
        for group in trajs.chunks(g) {
            total += population_variance(&evaluate_group(spec, group)?);
        }
        done += m;
    }
    Ok(total / n_groups as f64)
}

/// Standard deviation of the plain reward over single-transition rollouts
/// with uniformly drawn timesteps and prompts.
pub fn base_reward_std<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    spec: &RewardSpec,
    schedule: &NoiseSchedule,
    samples: usize,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<f64> {
    if samples < 2 {
        bail!(Config, "need at least two samples");
    }
    let v = mean_group_variance(params, spec, schedule, samples, 1, cfg_scale, true, rng)?;
    Ok(libm::sqrt(v))
}

/// Within-group (pre-normalization) reward variance under naive per-rollout
/// timesteps versus one shared timestep per group. Passes when the naive
/// variance is at least twice the iso variance.
pub fn variance_decomposition<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    spec: &RewardSpec,
    schedule: &NoiseSchedule,
    group_size: usize,
    n_groups: usize,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<VerificationReport> {
    spec.validate()?;
    if group_size < 2 || n_groups == 0 {
        bail!(Config, "variance decomposition needs G >= 2 and at least one group");
    }
    let naive = mean_group_variance(params, spec, schedule, group_size, n_groups, cfg_scale, true, rng)?;
    let iso = mean_group_variance(params, spec, schedule, group_size, n_groups, cfg_scale, false, rng)?;
    let ratio = naive / iso;
    Ok(VerificationReport::new("variance_decomposition", ratio >= 2.0, ratio, 2.0)
        .with("naive_variance", naive)
        .with("iso_variance", iso)
        .with("groups", n_groups as f64)
        .with("group_size", group_size as f64))
}
