use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::counter;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    ScaleBy {
        tensor: NodeId,
        scalar: NodeId,
    },
    Sum(NodeId),
    SumRows(NodeId),
    SquaredNorm(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Concat(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph. Nodes are stored in creation order, which
/// is a topological order because every op only references earlier nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kernel_evals: u64,
}

/// Gradients of a scalar output with respect to every parameter leaf of a
/// graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Tensor>,
    kernel_evals: u64,
}

impl GradientSet {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Transition-kernel gradient evaluations accounted to this backward pass.
    pub fn kernel_evals(&self) -> u64 {
        self.kernel_evals
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.grads.values().map(Tensor::squared_norm).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for t in self.grads.values_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Adds `other` into `self`, summing kernel-evaluation counts. Parameters
    /// present in only one of the two sets are kept as they are.
    pub fn merge(&mut self, other: GradientSet) -> Result<()> {
        for (id, t) in other.grads {
            match self.grads.get_mut(&id) {
                Some(mine) => {
                    if !mine.same_shape(&t) {
                        bail!(Dimension, "gradient shapes {:?} and {:?} differ", mine.shape(), t.shape());
                    }
                    mine.add_assign(&t);
                }
                None => {
                    self.grads.insert(id, t);
                }
            }
        }
        self.kernel_evals += other.kernel_evals;
        Ok(())
    }

    /// Flattens gradients in parameter-id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }
}

/// `y[r, o] = (sum_i w[o, i] x[r, i]) + b[o]`, accumulating each output in
/// increasing `i` order. The loop runs over a transposed weight so the
/// accumulators of all outputs advance together.
pub(crate) fn affine_forward(w: &[f64], b: &[f64], out: usize, inn: usize, x: &[f64], rows: usize) -> Vec<f64> {
    let mut wt = vec![0.0; inn * out];
    for o in 0..out {
        for i in 0..inn {
            wt[i * out + o] = w[o * inn + i];
        }
    }
    let mut y = vec![0.0; rows * out];
    for (yr, xr) in y.chunks_exact_mut(out).zip(x.chunks_exact(inn)) {
        for (xi, wrow) in xr.iter().zip(wt.chunks_exact(out)) {
            for (acc, wv) in yr.iter_mut().zip(wrow) {
                *acc += wv * xi;
            }
        }
        for (acc, bv) in yr.iter_mut().zip(b) {
            *acc += bv;
        }
    }
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Declares that this graph evaluates `n` transition kernels whose
    /// gradients the next [`Graph::backward`] call will compute.
    pub fn record_kernel_evals(&mut self, n: u64) {
        self.kernel_evals += n;
    }

    pub fn kernel_evals(&self) -> u64 {
        self.kernel_evals
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `y[r, o] = sum_i weight[o, i] * input[r, i] + bias[o]` for every row
    /// `r` of the input (a single vector is one row).
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if w.shape().len() != 2 {
            bail!(Dimension, "affine weight must be rank 2, got {:?}", w.shape());
        }
        let (out, inn) = (w.shape()[0], w.shape()[1]);
        if x.shape().is_empty() || x.last_dim() != inn {
            bail!(
                Dimension,
                "affine input {:?} does not match weight {:?}",
                x.shape(),
                w.shape()
            );
        }
        if b.shape() != [out] {
            bail!(Dimension, "affine bias {:?} expected [{}]", b.shape(), out);
        }
        let y = affine_forward(w.values(), b.values(), out, inn, x.values(), x.rows());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            value,
            &[input, weight, bias],
        ))
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, libm::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, libm::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).values().iter().any(|&v| v <= 0.0) {
            bail!(Domain, "log of a non-positive value");
        }
        let v = self.map(a, libm::log);
        Ok(self.push(Op::Log(a), v, &[a]))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.map(a, |x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    /// Adds a fixed constant to every element.
    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.map(a, |x| x + c);
        self.push(Op::Shift(a), v, &[a])
    }

    fn zip(&self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            bail!(Dimension, "{}: shapes {:?} and {:?} differ", what, x.shape(), y.shape());
        }
        let v = x.values().iter().zip(y.values()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "add", |p, q| p + q)?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    /// Multiplies every element of `tensor` by the single value of `scalar`.
    pub fn scale_by(&mut self, tensor: NodeId, scalar: NodeId) -> Result<NodeId> {
        if !self.value(scalar).is_scalar() {
            bail!(Dimension, "scale_by needs a scalar, got {:?}", self.value(scalar).shape());
        }
        let s = self.value(scalar).item();
        let v = self.map(tensor, |x| x * s);
        Ok(self.push(Op::ScaleBy { tensor, scalar }, v, &[tensor, scalar]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Sums over the trailing axis: `[rows, k] -> [rows]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            bail!(Dimension, "sum_rows needs a rank-2 tensor, got {:?}", t.shape());
        }
        let k = t.last_dim();
        let v: Vec<f64> = t.values().chunks(k).map(|c| c.iter().sum()).collect();
        Ok(self.push(Op::SumRows(a), Tensor::vector(v), &[a]))
    }

    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).squared_norm();
        self.push(Op::SquaredNorm(a), Tensor::scalar(s), &[a])
    }

    /// Concatenates along the trailing axis; both operands need the same
    /// number of rows.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().is_empty() || y.shape().is_empty() || x.shape().len() != y.shape().len() {
            bail!(Dimension, "concat of {:?} and {:?}", x.shape(), y.shape());
        }
        let rank = x.shape().len();
        if x.shape()[..rank - 1] != y.shape()[..rank - 1] {
            bail!(Dimension, "concat row shapes {:?} and {:?} differ", x.shape(), y.shape());
        }
        let (p, q) = (x.last_dim(), y.last_dim());
        let mut v = Vec::with_capacity(x.len() + y.len());
        for r in 0..x.rows() {
            v.extend_from_slice(&x.values()[r * p..(r + 1) * p]);
            v.extend_from_slice(&y.values()[r * q..(r + 1) * q]);
        }
        let mut shape = x.shape().to_vec();
        shape[rank - 1] = p + q;
        let value = Tensor::new(shape, v)?;
        Ok(self.push(Op::Concat(a, b), value, &[a, b]))
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// parameter leaf. Each node is visited once, in reverse creation order.
    pub fn backward(&self, output: NodeId) -> Result<GradientSet> {
        if !self.value(output).is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let mut params = BTreeMap::new();
        for node in &self.nodes[..=output.0] {
            if let Op::Param(id) = node.op {
                params
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        let seed = Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?;
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    params.get_mut(&id).expect("registered").add_assign(&g);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => self.backward_affine(&mut grads, &g, input, weight, bias),
                Op::Tanh(a) => {
                    let y = node.value.values();
                    let d = g.values().iter().zip(y).map(|(g, y)| g * (1.0 - y * y));
                    self.accumulate(&mut grads, a, d.collect());
                }
                Op::Exp(a) => {
                    let y = node.value.values();
                    let d = g.values().iter().zip(y).map(|(g, y)| g * y);
                    self.accumulate(&mut grads, a, d.collect());
                }
                Op::Log(a) => {
                    let x = self.value(a).values();
                    let d = g.values().iter().zip(x).map(|(g, x)| g / x);
                    self.accumulate(&mut grads, a, d.collect());
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, a, g.values().iter().map(|g| g * c).collect());
                }
                Op::Shift(a) => self.accumulate(&mut grads, a, g.into_values()),
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g.values().to_vec());
                    self.accumulate(&mut grads, b, g.into_values());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, b, g.values().iter().map(|v| -v).collect());
                    self.accumulate(&mut grads, a, g.into_values());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(a).values(), self.value(b).values());
                    let da = g.values().iter().zip(y).map(|(g, y)| g * y).collect();
                    let db = g.values().iter().zip(x).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::ScaleBy { tensor, scalar } => {
                    let s = self.value(scalar).item();
                    let x = self.value(tensor).values();
                    let ds: f64 = g.values().iter().zip(x).map(|(g, x)| g * x).sum();
                    self.accumulate(&mut grads, scalar, vec![ds]);
                    self.accumulate(&mut grads, tensor, g.values().iter().map(|g| g * s).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    self.accumulate(&mut grads, a, vec![g.item(); n]);
                }
                Op::SumRows(a) => {
                    let k = self.value(a).last_dim();
                    let d = g.values().iter().flat_map(|&v| core::iter::repeat_n(v, k));
                    self.accumulate(&mut grads, a, d.collect());
                }
                Op::SquaredNorm(a) => {
                    let s = 2.0 * g.item();
                    let d = self.value(a).values().iter().map(|x| s * x).collect();
                    self.accumulate(&mut grads, a, d);
                }
                Op::Concat(a, b) => {
                    let (p, q) = (self.value(a).last_dim(), self.value(b).last_dim());
                    let mut da = Vec::with_capacity(self.value(a).len());
                    let mut db = Vec::with_capacity(self.value(b).len());
                    for row in g.values().chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
            }
        }
        counter::add(self.kernel_evals);
        Ok(GradientSet {
            grads: params,
            kernel_evals: self.kernel_evals,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.values_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("shape"));
            }
        }
    }

    fn backward_affine(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) {
        let (x, w) = (self.value(input), self.value(weight));
        let (out, inn) = (w.shape()[0], w.shape()[1]);
        let rows = x.rows();
        let (gv, xv, wv) = (g.values(), x.values(), w.values());
        if self.nodes[input.0].requires_grad {
            let mut dx = vec![0.0; rows * inn];
            for r in 0..rows {
                let dxr = &mut dx[r * inn..(r + 1) * inn];
                for o in 0..out {
                    let go = gv[r * out + o];
                    for (d, wi) in dxr.iter_mut().zip(&wv[o * inn..(o + 1) * inn]) {
                        *d += go * wi;
                    }
                }
            }
            self.accumulate(grads, input, dx);
        }
        if self.nodes[weight.0].requires_grad {
            let mut dw = vec![0.0; out * inn];
            for r in 0..rows {
                let xr = &xv[r * inn..(r + 1) * inn];
                for o in 0..out {
                    let go = gv[r * out + o];
                    for (d, xi) in dw[o * inn..(o + 1) * inn].iter_mut().zip(xr) {
                        *d += go * xi;
                    }
                }
            }
            self.accumulate(grads, weight, dw);
        }
        if self.nodes[bias.0].requires_grad {
            let mut db = vec![0.0; out];
            for r in 0..rows {
                for (d, v) in db.iter_mut().zip(&gv[r * out..(r + 1) * out]) {
                    *d += v;
                }
            }
            self.accumulate(grads, bias, db);
        }
    }
}
