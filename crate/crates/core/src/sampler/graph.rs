//! Differentiable versions of the guided velocity, transition mean and
//! transition log-density. Forward values match the plain functions in the
//! parent module bitwise.

use alloc::vec::Vec;

use super::{log_prob_coefficient, log_prob_offset, TransitionRecord};
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{bail, Result};
use crate::model::{velocity_graph, Cond, ParamNodes, VectorFieldParams};

/// A batch of stored transitions laid out row-wise for graph evaluation.
#[derive(Debug, Clone, Default)]
pub struct KernelRows {
    dim: usize,
    x_t: Vec<f64>,
    x_next: Vec<f64>,
    t: Vec<f64>,
    dt: Vec<f64>,
    sigma: Vec<f64>,
    conds: Vec<Cond>,
}

impl KernelRows {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn push(&mut self, rec: &TransitionRecord, cond: Cond) -> Result<()> {
        if rec.x_t.len() != self.dim || rec.x_next.len() != self.dim {
            bail!(Dimension, "transition record of dimension {} in rows of dimension {}", rec.x_t.len(), self.dim);
        }
        self.x_t.extend_from_slice(&rec.x_t);
        self.x_next.extend_from_slice(&rec.x_next);
        self.t.push(rec.t);
        self.dt.push(rec.dt);
        self.sigma.push(rec.sigma);
        self.conds.push(cond);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn per_element(&self, f: impl Fn(usize) -> f64) -> Result<Tensor> {
        let mut v = Vec::with_capacity(self.len() * self.dim);
        for r in 0..self.len() {
            let value = f(r);
            v.extend(core::iter::repeat_n(value, self.dim));
        }
        Tensor::matrix(self.len(), self.dim, v)
    }
}

/// Guided velocity `v_u + s (v_c - v_u)` as a graph expression.
pub fn cfg_velocity_graph(
    g: &mut Graph,
    params: &VectorFieldParams,
    nodes: &ParamNodes,
    x: NodeId,
    t: &[f64],
    conds: &[Cond],
    scale: f64,
) -> Result<NodeId> {
    if !(scale >= 0.0) || !scale.is_finite() {
        bail!(Config, "guidance scale must be finite and non-negative, got {}", scale);
    }
    if scale == 1.0 {
        return velocity_graph(g, params, nodes, x, t, conds);
    }
    let uncond: Vec<Cond> = alloc::vec![Cond::Uncond; conds.len()];
    let vu = velocity_graph(g, params, nodes, x, t, &uncond)?;
    if scale == 0.0 {
        return Ok(vu);
    }
    let vc = velocity_graph(g, params, nodes, x, t, conds)?;
    let diff = g.sub(vc, vu)?;
    let scaled = g.scale(diff, scale);
    g.add(vu, scaled)
}

/// Transition means for every row, `[rows, dim]`.
pub fn transition_mean_graph(
    g: &mut Graph,
    params: &VectorFieldParams,
    nodes: &ParamNodes,
    rows: &KernelRows,
    scale: f64,
) -> Result<NodeId> {
    if let Some(t) = rows.t.iter().find(|&&t| !(t > 0.0)) {
        bail!(Domain, "transition mean needs t > 0, got {}", t);
    }
    let n = rows.len();
    let x = g.constant(Tensor::matrix(n, rows.dim, rows.x_t.clone())?);
    let v = cfg_velocity_graph(g, params, nodes, x, &rows.t, &rows.conds, scale)?;
    let omt = g.constant(rows.per_element(|r| 1.0 - rows.t[r])?);
    let k = g.constant(rows.per_element(|r| rows.sigma[r] * rows.sigma[r] / (2.0 * rows.t[r]))?);
    let dt = g.constant(rows.per_element(|r| rows.dt[r])?);
    let v_omt = g.mul(v, omt)?;
    let inner = g.add(x, v_omt)?;
    let corr = g.mul(inner, k)?;
    let drift = g.add(v, corr)?;
    let step = g.mul(drift, dt)?;
    g.sub(x, step)
}

/// Gaussian log-densities of the stored `x_next` values, `[rows]`.
pub fn log_prob_graph(g: &mut Graph, mu: NodeId, rows: &KernelRows) -> Result<NodeId> {
    for (s, d) in rows.sigma.iter().zip(&rows.dt) {
        let var = s * s * d;
        if !(var > 0.0) || !var.is_finite() {
            bail!(Domain, "transition variance must be positive, got sigma={} dt={}", s, d);
        }
    }
    let n = rows.len();
    let next = g.constant(Tensor::matrix(n, rows.dim, rows.x_next.clone())?);
    let diff = g.sub(next, mu)?;
    let sq = g.mul(diff, diff)?;
    let sums = g.sum_rows(sq)?;
    let coeff: Vec<f64> = (0..n).map(|r| log_prob_coefficient(rows.sigma[r], rows.dt[r])).collect();
    let offset: Vec<f64> = (0..n).map(|r| log_prob_offset(rows.dim, rows.sigma[r], rows.dt[r])).collect();
    let coeff = g.constant(Tensor::vector(coeff));
    let offset = g.constant(Tensor::vector(offset));
    let quad = g.mul(sums, coeff)?;
    g.add(quad, offset)
}
