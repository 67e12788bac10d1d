use alloc::vec::Vec;

use rand::Rng;

use super::{velocity_graph, Cond, DataSpec, VectorFieldParams};
use crate::diff::{Graph, Tensor};
use crate::error::{bail, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::normal;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the condition by [`Cond::Uncond`].
    pub p_drop: f64,
    /// Warn when the mean loss of the final 100 iterations is above this.
    pub loss_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 256,
            lr: 1e-3,
            p_drop: 0.1,
            loss_threshold: 1.7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "pretrain batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "pretrain lr must be finite and non-negative, got {}", self.lr);
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            bail!(Config, "p_drop must lie in [0, 1], got {}", self.p_drop);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: VectorFieldParams,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
    /// Mean loss over the final (up to) 100 iterations.
    pub final_loss: f64,
    pub below_threshold: bool,
}

/// Rectified-flow interpolant `(1 - t) x0 + t eps`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect()
}

/// Flow-matching regression of `v(x_t, t, c)` onto `eps - x0` with
/// `t ~ U(0, 1)` and condition dropout.
pub fn fm_pretrain<R: Rng + ?Sized>(
    params: &VectorFieldParams,
    spec: &DataSpec,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let arch = *params.arch();
    if arch.dim != spec.dim || arch.classes != spec.class_count() {
        bail!(
            Config,
            "architecture (dim {}, {} classes) does not match data (dim {}, {} classes)",
            arch.dim,
            arch.classes,
            spec.dim,
            spec.class_count()
        );
    }
    let mut params = params.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &params);
    let n = cfg.batch_size;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut xt = Vec::with_capacity(n * arch.dim);
        let mut target = Vec::with_capacity(n * arch.dim);
        let mut ts = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..spec.class_count());
            let x0 = spec.sample(class, rng);
            let eps: Vec<f64> = (0..arch.dim).map(|_| normal(rng)).collect();
            let t: f64 = rng.random();
            xt.extend(interpolate(&x0, &eps, t));
            target.extend(eps.iter().zip(&x0).map(|(e, a)| e - a));
            ts.push(t);
            let dropped = rng.random::<f64>() < cfg.p_drop;
            conds.push(if dropped { Cond::Uncond } else { Cond::Class(class) });
        }
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let x = g.constant(Tensor::matrix(n, arch.dim, xt)?);
        let v = velocity_graph(&mut g, &params, &nodes, x, &ts, &conds)?;
        let y = g.constant(Tensor::matrix(n, arch.dim, target)?);
        let diff = g.sub(v, y)?;
        let sq = g.squared_norm(diff);
        let loss = g.scale(sq, 1.0 / n as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            bail!(NonFinite, "flow-matching loss is {} at iteration {}", value, iter);
        }
        let grads = g.backward(loss)?;
        adam.step(&mut params, &grads)?;
        losses.push(value);
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let below_threshold = final_loss < cfg.loss_threshold;
    if cfg.iterations > 0 && !below_threshold {
        log::warn!(
            "flow-matching loss {:.4} did not reach threshold {:.4}",
            final_loss,
            cfg.loss_threshold
        );
    }
    Ok(PretrainOutcome {
        params,
        losses,
        final_loss,
        below_threshold,
    })
}
