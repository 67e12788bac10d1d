//! Directional check of the transition log-density gradient against the
//! velocity Jacobian.
//!
//! With `x_next = mu(theta) + sigma sqrt(dt) eps` held fixed, the parameter
//! gradient of the Gaussian log-density along a direction `u` equals
//! `-lambda(t) * eps . (J_v u)`, where `J_v u` is the directional derivative
//! of the guided velocity. The minus sign comes from states moving towards
//! lower `t` (`x_next = x - v dt + ...`); in terms of the denoising direction
//! `-v` the identity reads `+lambda * eps . J_{-v} u`.

use alloc::vec::Vec;

use rand::Rng;

use super::fd::directional_difference;
use super::VerificationReport;
use crate::diff::Graph;
use crate::error::{bail, Result};
use crate::model::{Cond, VectorFieldParams};
use crate::rng::normal_vec;
use crate::sampler::{cfg_velocity, log_prob_graph, transition_mean, KernelRows, TransitionRecord};
use crate::schedule::NoiseSchedule;

/// `sqrt(dt)/sigma + sigma sqrt(dt) (1 - t) / (2t)`, evaluated from scratch.
pub fn reference_lambda(t: f64, dt: f64, sigma: f64) -> f64 {
    let root = libm::sqrt(dt);
    root / sigma + sigma * root * (1.0 - t) / (2.0 * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradIdentityConfig {
    pub trials: usize,
    pub cfg_scale: f64,
    /// Finite-difference step for the Jacobian-vector product.
    pub h: f64,
    pub tolerance: f64,
    /// Multiplies the reference scale; anything but 1 is a deliberate fault.
    pub lambda_fault: f64,
}

impl Default for GradIdentityConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            cfg_scale: 4.5,
            h: 1e-4,
            tolerance: 1e-6,
            lambda_fault: 1.0,
        }
    }
}

/// Jacobian-vector product of the guided velocity by Richardson-extrapolated
/// central differences.
fn jvp(params: &VectorFieldParams, x: &[f64], t: f64, c: Cond, scale: f64, u: &[f64], h: f64) -> Result<Vec<f64>> {
    let flat = params.flatten();
    let mut f = |theta: &[f64]| cfg_velocity(&params.with_flat(theta)?, x, t, c, scale);
    let coarse = directional_difference(&mut f, &flat, u, h)?;
    let fine = directional_difference(&mut f, &flat, u, h / 2.0)?;
    Ok(fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
}

fn relative(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

/// Random trials over steps, states, noise, prompts and directions.
/// Reports the worst relative error.
pub fn check_grad_identity<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    schedule: &NoiseSchedule,
    config: &GradIdentityConfig,
    rng: &mut R,
) -> Result<VerificationReport> {
    if config.trials == 0 {
        bail!(Config, "gradient identity needs at least one trial");
    }
    let arch = *params.arch();
    let n = params.param_count();
    let mut worst = 0.0f64;
    for _ in 0..config.trials {
        let k = rng.random_range(schedule.eligible());
        let step = schedule.step(k);
        let (t, dt, sigma) = (step.t, step.dt, step.sigma);
        let c = if rng.random_bool(0.2) {
            Cond::Uncond
        } else {
            Cond::Class(rng.random_range(0..arch.classes))
        };
        let x_t = normal_vec(rng, arch.dim);
        let eps = normal_vec(rng, arch.dim);
        let mut u = normal_vec(rng, n);
        let norm = libm::sqrt(u.iter().map(|v| v * v).sum::<f64>());
        u.iter_mut().for_each(|v| *v /= norm);

        let mu = transition_mean(params, &x_t, t, dt, c, sigma, config.cfg_scale)?;
        let std = sigma * libm::sqrt(dt);
        let x_next: Vec<f64> = mu.iter().zip(&eps).map(|(m, e)| m + std * e).collect();
        let rec = TransitionRecord {
            step: k,
            t,
            dt,
            sigma,
            lambda: step.lambda,
            x_t: x_t.clone(),
            x_next,
            eps: eps.clone(),
            log_prob_old: 0.0,
        };
        let mut rows = KernelRows::new(arch.dim);
        rows.push(&rec, c)?;
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let mean = crate::sampler::transition_mean_graph(&mut g, params, &nodes, &rows, config.cfg_scale)?;
        let lp = log_prob_graph(&mut g, mean, &rows)?;
        let out = g.sum(lp);
        let grad = g.backward(out)?.flatten();
        let auto: f64 = grad.iter().zip(&u).map(|(a, b)| a * b).sum();

        let jv = jvp(params, &x_t, t, c, config.cfg_scale, &u, config.h)?;
        let lambda = config.lambda_fault * reference_lambda(t, dt, sigma);
        let oracle = -lambda * eps.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>();
        worst = worst.max(relative(auto, oracle));
    }
    Ok(
        VerificationReport::new("grad_identity", worst <= config.tolerance, worst, config.tolerance)
            .with("trials", config.trials as f64)
            .with("lambda_fault", config.lambda_fault),
    )
}
