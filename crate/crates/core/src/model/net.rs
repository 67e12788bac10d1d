use alloc::vec;
use alloc::vec::Vec;

use super::{Cond, ParamNodes, VectorFieldParams};
use crate::diff::{affine_forward, Graph, NodeId, Tensor};
use crate::error::{bail, Result};

/// Fixed Fourier frequencies `2^0 ... 2^7`.
pub const TIME_FREQUENCIES: [f64; 8] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
pub const TIME_FEATURES: usize = 2 * TIME_FREQUENCIES.len();

/// `[sin(w_0 t) .. sin(w_7 t), cos(w_0 t) .. cos(w_7 t)]`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for (i, w) in TIME_FREQUENCIES.iter().enumerate() {
        out[i] = libm::sin(w * t);
        out[i + TIME_FREQUENCIES.len()] = libm::cos(w * t);
    }
    out
}

fn check_rows(params: &VectorFieldParams, x_len: usize, t: &[f64], conds: &[Cond]) -> Result<usize> {
    let arch = params.arch();
    let rows = t.len();
    if conds.len() != rows || x_len != rows * arch.dim {
        bail!(
            Dimension,
            "velocity batch mismatch: {} values for dim {}, {} times, {} conditions",
            x_len,
            arch.dim,
            rows,
            conds.len()
        );
    }
    for &c in conds {
        arch.check_cond(c)?;
    }
    Ok(rows)
}

/// Vector field as a differentiable graph expression.
///
/// `x` must have shape `[rows, dim]`; `t` and `conds` carry one entry per
/// row. Returns a `[rows, dim]` node.
pub fn velocity_graph(
    g: &mut Graph,
    params: &VectorFieldParams,
    nodes: &ParamNodes,
    x: NodeId,
    t: &[f64],
    conds: &[Cond],
) -> Result<NodeId> {
    let arch = *params.arch();
    let rows = check_rows(params, g.value(x).len(), t, conds)?;
    if g.value(x).shape() != [rows, arch.dim] {
        bail!(Dimension, "velocity input must be [{}, {}], got {:?}", rows, arch.dim, g.value(x).shape());
    }
    let mut feats = Vec::with_capacity(rows * TIME_FEATURES);
    for &ti in t {
        feats.extend_from_slice(&time_features(ti));
    }
    let feats = g.constant(Tensor::matrix(rows, TIME_FEATURES, feats)?);

    let cols = arch.classes + 1;
    let mut onehot = vec![0.0; rows * cols];
    for (r, &c) in conds.iter().enumerate() {
        onehot[r * cols + arch.cond_column(c)] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(rows, cols, onehot)?);
    let no_bias = g.constant(Tensor::zeros(&[arch.embed]));
    let emb = g.affine(onehot, nodes.get(0), no_bias)?;

    let h = g.concat(x, feats)?;
    let mut h = g.concat(h, emb)?;
    for layer in 0..arch.depth {
        let z = g.affine(h, nodes.get(1 + 2 * layer), nodes.get(2 + 2 * layer))?;
        h = g.tanh(z);
    }
    let out = 1 + 2 * arch.depth;
    g.affine(h, nodes.get(out), nodes.get(out + 1))
}

fn affine_rows(w: &Tensor, b: &Tensor, x: &[f64], rows: usize, out: &mut Vec<f64>) {
    *out = affine_forward(w.values(), b.values(), w.shape()[0], w.shape()[1], x, rows);
}

/// Allocation-light forward pass with no graph recording.
///
/// Produces values bitwise identical to [`velocity_graph`]. `x` is
/// row-major `[rows, dim]`.
pub fn velocity_rows(params: &VectorFieldParams, x: &[f64], t: &[f64], conds: &[Cond]) -> Result<Vec<f64>> {
    let arch = *params.arch();
    let rows = check_rows(params, x.len(), t, conds)?;
    let tensors = params.tensors();
    let table = &tensors[0];
    let cols = arch.classes + 1;
    let in_w = arch.input_width();
    let mut h = Vec::with_capacity(rows * in_w);
    for r in 0..rows {
        h.extend_from_slice(&x[r * arch.dim..(r + 1) * arch.dim]);
        h.extend_from_slice(&time_features(t[r]));
        let col = arch.cond_column(conds[r]);
        // same arithmetic as the one-hot affine in the graph path
        for e in 0..arch.embed {
            let row = &table.values()[e * cols..(e + 1) * cols];
            let mut acc = 0.0;
            for (j, v) in row.iter().enumerate() {
                acc += v * if j == col { 1.0 } else { 0.0 };
            }
            h.push(acc + 0.0);
        }
    }
    let mut z = Vec::new();
    for layer in 0..arch.depth {
        affine_rows(&tensors[1 + 2 * layer], &tensors[2 + 2 * layer], &h, rows, &mut z);
        for v in z.iter_mut() {
            *v = libm::tanh(*v);
        }
        core::mem::swap(&mut h, &mut z);
    }
    let out = 1 + 2 * arch.depth;
    affine_rows(&tensors[out], &tensors[out + 1], &h, rows, &mut z);
    Ok(z)
}
