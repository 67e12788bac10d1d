//! Discretized denoising schedule.
//!
//! States run from `t = 1` (pure noise) down to `t_floor`, followed by one
//! deterministic step to `t = 0`. Transition `k` (for `k` in `1..=T`) moves
//! a state from `t_k` to `t_{k-1}` with positive step size
//! `dt_k = t_k - t_{k-1}`.

use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Per-transition quantities of a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    /// Transition index `k` in `1..=T`.
    pub index: usize,
    /// Time at the start of the transition.
    pub t: f64,
    pub dt: f64,
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    steps: usize,
    noise_scale: f64,
    t_floor: f64,
    grid: Vec<f64>,
    transitions: Vec<Step>,
}

/// Scaling factor multiplying the policy gradient of one Gaussian transition:
/// `sqrt(dt)/sigma + sigma*sqrt(dt)*(1-t)/(2t)`.
pub fn lambda_of(t: f64, dt: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0) {
        bail!(Domain, "lambda needs t > 0, got {}", t);
    }
    if !(dt > 0.0) || !(sigma > 0.0) {
        bail!(Domain, "lambda needs dt > 0 and sigma > 0, got dt={} sigma={}", dt, sigma);
    }
    let root = libm::sqrt(dt);
    Ok(root / sigma + sigma * root * (1.0 - t) / (2.0 * t))
}

/// Noise level `a * sqrt(t / (1 - t))`.
pub fn sigma_of(t: f64, noise_scale: f64) -> f64 {
    noise_scale * libm::sqrt(t / (1.0 - t))
}

impl NoiseSchedule {
    /// Uniform grid `t_i = t_floor + (1 - t_floor) * i / T`.
    ///
    /// The noise level of the first transition is evaluated at `t_{T-1}`
    /// because `sigma_of` diverges at `t = 1`.
    pub fn new(steps: usize, noise_scale: f64, t_floor: f64) -> Result<Self> {
        if steps < 2 {
            bail!(Config, "schedule needs at least 2 steps, got {}", steps);
        }
        if !(noise_scale > 0.0) || !noise_scale.is_finite() {
            bail!(Config, "noise scale must be positive and finite, got {}", noise_scale);
        }
        if !(t_floor > 0.0 && t_floor < 1.0 / steps as f64) {
            bail!(Config, "t_floor must lie in (0, 1/T) = (0, {}), got {}", 1.0 / steps as f64, t_floor);
        }
        let mut grid: Vec<f64> = (0..=steps)
            .map(|i| t_floor + (1.0 - t_floor) * i as f64 / steps as f64)
            .collect();
        grid[steps] = 1.0;
        let sigma_t_max = grid[steps - 1];
        let transitions = (1..=steps)
            .map(|k| {
                let t = grid[k];
                let dt = grid[k] - grid[k - 1];
                let sigma = sigma_of(t.min(sigma_t_max), noise_scale);
                let lambda = lambda_of(t, dt, sigma)?;
                Ok(Step {
                    index: k,
                    t,
                    dt,
                    sigma,
                    lambda,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            steps,
            noise_scale,
            t_floor,
            grid,
            transitions,
        })
    }

    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor
    }

    /// Times `t_0 = t_floor < ... < t_T = 1`, indexed by grid position.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Transition `k` in `1..=T`.
    pub fn step(&self, k: usize) -> &Step {
        &self.transitions[k - 1]
    }

    /// Transitions in sampling order, from `k = T` down to `k = 1`.
    pub fn transitions(&self) -> impl DoubleEndedIterator<Item = &Step> + ExactSizeIterator {
        self.transitions.iter().rev()
    }

    /// Transitions that may carry the stochastic step: every `k` in `1..=T`.
    /// The final jump from `t_floor` to zero is never stochastic.
    pub fn eligible(&self) -> core::ops::RangeInclusive<usize> {
        1..=self.steps
    }

    pub fn eligible_count(&self) -> usize {
        self.steps
    }

    /// The `T/2` highest-noise transitions.
    pub fn first_half(&self) -> core::ops::RangeInclusive<usize> {
        (self.steps - self.steps / 2 + 1)..=self.steps
    }

    pub fn lambda_min(&self) -> f64 {
        self.transitions.iter().map(|s| s.lambda).fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        self.transitions.iter().map(|s| s.lambda).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy of the schedule with every `lambda` replaced by one.
    pub fn with_unit_lambda(&self) -> Self {
        let mut s = self.clone();
        for step in &mut s.transitions {
            step.lambda = 1.0;
        }
        s
    }

    /// Copy of the schedule with every `lambda` multiplied by `factor`.
    /// Only used to inject faults into verification checks.
    pub fn with_lambda_scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for step in &mut s.transitions {
            step.lambda *= factor;
        }
        s
    }

    /// Copy with every noise level multiplied by `factor` (and `lambda`
    /// recomputed).
    pub fn with_sigma_scaled(&self, factor: f64) -> Result<Self> {
        let mut s = self.clone();
        for step in &mut s.transitions {
            step.sigma *= factor;
            step.lambda = lambda_of(step.t, step.dt, step.sigma)?;
        }
        Ok(s)
    }
}
