//! Analytic rewards over terminal samples.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::model::{Cond, DataSpec};
use crate::sampler::Trajectory;

/// Function of the stochastic-transition time added by the probe reward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ProbeFn {
    /// `g(t) = t`.
    #[default]
    Identity,
}

impl ProbeFn {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            ProbeFn::Identity => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RewardKind {
    /// `exp(-gamma |x0 - mu*_c|^2)`.
    ModePreference,
    /// Mode preference plus `amplitude * g(t_used)`.
    TimeProbe { amplitude: f64, probe: ProbeFn },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Preferred mode mean per class.
    pub targets: Vec<Vec<f64>>,
    /// Sharpness `gamma > 0`.
    pub sharpness: f64,
}

impl RewardSpec {
    /// Mode-preference reward towards each class's preferred mixture mode.
    pub fn mode_preference(data: &DataSpec, sharpness: f64) -> Self {
        Self {
            kind: RewardKind::ModePreference,
            targets: (0..data.class_count())
                .map(|c| data.preferred_mean(c).to_vec())
                .collect(),
            sharpness,
        }
    }

    pub fn with_probe(mut self, amplitude: f64) -> Self {
        self.kind = RewardKind::TimeProbe {
            amplitude,
            probe: ProbeFn::Identity,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0) || !self.sharpness.is_finite() {
            bail!(Config, "reward sharpness must be positive, got {}", self.sharpness);
        }
        if let RewardKind::TimeProbe { amplitude, .. } = self.kind {
            if !(amplitude >= 0.0) || !amplitude.is_finite() {
                bail!(Config, "probe amplitude must be non-negative, got {}", amplitude);
            }
        }
        Ok(())
    }

    /// Largest attainable reward (at the preferred mean, with `g(t) <= 1`).
    pub fn optimum(&self) -> f64 {
        match self.kind {
            RewardKind::ModePreference => 1.0,
            RewardKind::TimeProbe { amplitude, .. } => 1.0 + amplitude,
        }
    }
}

/// Reward of a terminal sample for prompt class `class`. `t_used` is the
/// time of the stochastic transition and only matters for the probe kind.
pub fn reward(spec: &RewardSpec, x0: &[f64], class: usize, t_used: f64) -> Result<f64> {
    let Some(target) = spec.targets.get(class) else {
        bail!(Lookup, "no reward target for class {} (have {})", class, spec.targets.len());
    };
    if target.len() != x0.len() {
        bail!(Dimension, "sample has {} values, target {}", x0.len(), target.len());
    }
    let dist2: f64 = x0.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let base = libm::exp(-spec.sharpness * dist2);
    Ok(match spec.kind {
        RewardKind::ModePreference => base,
        RewardKind::TimeProbe { amplitude, probe } => base + amplitude * probe.eval(t_used),
    })
}

fn class_of(cond: Cond) -> Result<usize> {
    match cond {
        Cond::Class(c) => Ok(c),
        Cond::Uncond => bail!(Lookup, "rewards need a class-conditioned trajectory"),
    }
}

/// Time of the (first) stochastic transition of a trajectory, or 0 if it
/// has none.
pub fn transition_time(traj: &Trajectory) -> f64 {
    traj.records.first().map_or(0.0, |r| r.t)
}

/// Rewards of every trajectory in a group, in order.
pub fn evaluate_group(spec: &RewardSpec, trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    trajectories
        .iter()
        .map(|tr| reward(spec, &tr.final_sample, class_of(tr.cond)?, transition_time(tr)))
        .collect()
}
