//! ODE/SDE marginal agreement of a trained vector field.

use alloc::vec::Vec;

use rand::Rng;

use super::{energy_distance_test, VerificationReport};
use crate::error::{bail, Result};
use crate::model::{Cond, VectorFieldParams};
use crate::rng::normal_vec;
use crate::sampler::{terminal_samples, SdePlan};
use crate::schedule::NoiseSchedule;

fn samples<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    plan: SdePlan,
    n: usize,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let classes = params.arch().classes;
    let dim = params.arch().dim;
    let initial: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, dim)).collect();
    let conds: Vec<Cond> = (0..n).map(|i| Cond::Class(i * classes / n)).collect();
    terminal_samples(params, &initial, &conds, plan, schedule, cfg_scale, rng)
}

/// Energy-distance permutation test between `n` terminal samples of the
/// pure ODE sampler and `n` of the all-SDE sampler, prompts split evenly
/// across classes and independent initial noise for the two sets. Passes
/// when the test does not reject at level `alpha`.
pub fn marginal_preservation<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    schedule: &NoiseSchedule,
    n: usize,
    permutations: usize,
    alpha: f64,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<VerificationReport> {
    if n == 0 {
        bail!(Config, "marginal test needs samples");
    }
    let ode = samples(params, SdePlan::Ode, n, schedule, cfg_scale, rng)?;
    let sde = samples(params, SdePlan::Full, n, schedule, cfg_scale, rng)?;
    let mut report = energy_distance_test(&ode, &sde, permutations, alpha, rng)?;
    report.name = "marginal_preservation".into();
    Ok(report.with("cfg_scale", cfg_scale))
}
