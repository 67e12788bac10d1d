//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The op set is closed and minimal: affine maps, `tanh`, elementwise
//! add/sub/mul, constant and scalar-node scaling, sums, squared L2 norm,
//! `exp`, `log` and concatenation along the trailing axis. Everything is
//! double precision.

mod counter;
mod graph;
mod tensor;

pub use counter::{backward_pass_counter, reset_counter};
pub(crate) use graph::affine_forward;
pub use graph::{GradientSet, Graph, NodeId, ParamId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` around `x`, never touching `backward`.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 4.0]);

        let x = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let w = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).values(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Dimension(_))));
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Dimension(_))));
    }

    fn affine_loss(params: &[f64], x: &[f64]) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let w = g.param(ParamId(0), Tensor::matrix(4, 3, params[..12].to_vec()).unwrap());
        let b = g.param(ParamId(1), Tensor::vector(params[12..].to_vec()));
        let xi = g.constant(Tensor::vector(x.to_vec()));
        let y = g.affine(xi, w, b).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.sum(sq);
        (g, s)
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = uniform(&mut rng, 16);
        let x = uniform(&mut rng, 3);
        let (g, out) = affine_loss(&params, &x);
        let grads = g.backward(out).unwrap().flatten();
        let fd = central_diff(&|p| { let (g, o) = affine_loss(p, &x); g.value(o).item() }, &params, 1e-5);
        assert!(max_rel_err(&grads, &fd) < 1e-6, "{}", max_rel_err(&grads, &fd));
    }

    #[test]
    fn batched_affine_matches_rowwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::matrix(2, 3, uniform(&mut rng, 6)).unwrap();
        let b = Tensor::vector(uniform(&mut rng, 2));
        let xs = uniform(&mut rng, 12);
        let mut g = Graph::new();
        let (wn, bn) = (g.constant(w), g.constant(b));
        let xb = g.constant(Tensor::matrix(4, 3, xs.clone()).unwrap());
        let yb = g.affine(xb, wn, bn).unwrap();
        assert_eq!(g.value(yb).shape(), &[4, 2]);
        for r in 0..4 {
            let xr = g.constant(Tensor::vector(xs[r * 3..r * 3 + 3].to_vec()));
            let yr = g.affine(xr, wn, bn).unwrap();
            assert_eq!(g.value(yr).values(), &g.value(yb).values()[r * 2..r * 2 + 2]);
        }
    }

    #[test]
    fn tanh_value_and_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::vector(vec![0.0]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).values(), &[0.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().values(), &[1.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = uniform(&mut rng, 6);
        let build = |x: &[f64]| {
            let mut g = Graph::new();
            let xn = g.param(ParamId(0), Tensor::vector(x.to_vec()));
            let cn = g.constant(Tensor::vector(c.clone()));
            let t = g.tanh(xn);
            let m = g.mul(t, cn).unwrap();
            let s = g.sum(m);
            (g, s)
        };
        let (g, s) = build(&x0);
        let grads = g.backward(s).unwrap().flatten();
        let fd = central_diff(&|x| { let (g, s) = build(x); g.value(s).item() }, &x0, 1e-5);
        assert!(max_rel_err(&grads, &fd) < 1e-6);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::vector(vec![1.0, 2.0]));
        let _unused = g.tanh(p);
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(ParamId(0)).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_the_parameter() {
        let theta = vec![0.3, -1.7, 2.5, 0.0];
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::vector(theta.clone()));
        let sq = g.squared_norm(p);
        let half = g.scale(sq, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().values(), theta.as_slice());
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(p), Err(Error::Domain(_))));
    }

    /// Two-layer tanh network with a scalar loss that exercises every op.
    fn two_layer(params: &[f64], x: &[f64]) -> (Graph, NodeId) {
        let (g, out, _) = two_layer_with_leaf(params, x);
        (g, out)
    }

    fn two_layer_with_leaf(params: &[f64], x: &[f64]) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let w1 = g.param(ParamId(0), Tensor::matrix(5, 3, params[0..15].to_vec()).unwrap());
        let b1 = g.param(ParamId(1), Tensor::vector(params[15..20].to_vec()));
        let w2 = g.param(ParamId(2), Tensor::matrix(2, 7, params[20..34].to_vec()).unwrap());
        let b2 = g.param(ParamId(3), Tensor::vector(params[34..36].to_vec()));
        let s = g.param(ParamId(4), Tensor::scalar(params[36]));
        let xin = g.constant(Tensor::matrix(2, 3, x.to_vec()).unwrap());
        let h = g.affine(xin, w1, b1).unwrap();
        let h = g.tanh(h);
        let extra = g.constant(Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 0.1]).unwrap());
        let h = g.concat(h, extra).unwrap();
        let y = g.affine(h, w2, b2).unwrap();
        let y = g.scale_by(y, s).unwrap();
        let rows = g.sum_rows(y).unwrap();
        let e = g.exp(rows);
        let e = g.shift(e, 1.0);
        let l = g.log(e).unwrap();
        let target = g.constant(Tensor::vector(vec![0.3, -0.2]));
        let d = g.sub(l, target).unwrap();
        let sq = g.squared_norm(d);
        let tot = g.sum(y);
        let out = g.add(sq, tot).unwrap();
        (g, out, w1)
    }

    #[test]
    fn two_layer_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = uniform(&mut rng, 37);
        let x = uniform(&mut rng, 6);
        let (g, out) = two_layer(&params, &x);
        let grads = g.backward(out).unwrap().flatten();
        let fd = central_diff(&|p| { let (g, o) = two_layer(p, &x); g.value(o).item() }, &params, 1e-5);
        assert!(max_rel_err(&grads, &fd) < 1e-4, "{}", max_rel_err(&grads, &fd));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = uniform(&mut rng, 37);
        let x = uniform(&mut rng, 6);
        let (g, out) = two_layer(&params, &x);
        assert_eq!(g.backward(out).unwrap(), g.backward(out).unwrap());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = uniform(&mut rng, 37);
        let x = uniform(&mut rng, 6);
        let (a, b) = (1.75, -0.6);
        let (g1, o1) = two_layer(&params, &x);
        let g1 = g1.backward(o1).unwrap().flatten();
        let sq = |p: &[f64]| {
            let mut g = Graph::new();
            let n = g.param(ParamId(0), Tensor::vector(p[..15].to_vec()));
            let t = g.tanh(n);
            let o = g.squared_norm(t);
            (g, o)
        };
        let (g2, o2) = sq(&params);
        let g2 = g2.backward(o2).unwrap();

        // Combined loss a*L1 + b*L2 in one graph sharing parameter leaves.
        let (mut g, o1, w1) = two_layer_with_leaf(&params, &x);
        let t = g.tanh(w1);
        let o2 = g.squared_norm(t);
        let s1 = g.scale(o1, a);
        let s2 = g.scale(o2, b);
        let out = g.add(s1, s2).unwrap();
        let combined = g.backward(out).unwrap().flatten();
        let g2w = g2.get(ParamId(0)).unwrap().values();
        for (i, c) in combined.iter().enumerate() {
            let expect = a * g1[i] + if i < 15 { b * g2w[i] } else { 0.0 };
            assert!((c - expect).abs() <= 1e-12 * expect.abs().max(1e-12), "{i}: {c} vs {expect}");
        }
    }

    proptest! {
        #[test]
        fn composed_scalar_functions_match_finite_differences(
            p in proptest::collection::vec(-10.0f64..10.0, 6),
            c in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            // exp(tanh(p0..3) . c) + log(1 + sum(p3..6)^2) - (p * p).sum() / 50
            let build = |p: &[f64]| {
                let mut g = Graph::new();
                let a = g.param(ParamId(0), Tensor::vector(p[..3].to_vec()));
                let b = g.param(ParamId(1), Tensor::vector(p[3..].to_vec()));
                let cn = g.constant(Tensor::vector(c.clone()));
                let t = g.tanh(a);
                let m = g.mul(t, cn).unwrap();
                let s = g.sum(m);
                let e = g.exp(s);
                let sb = g.sum(b);
                let sq = g.squared_norm(sb);
                let sh = g.shift(sq, 1.0);
                let l = g.log(sh).unwrap();
                let ab = g.concat(a, b).unwrap();
                let ab2 = g.mul(ab, ab).unwrap();
                let r = g.sum(ab2);
                let r = g.scale(r, -1.0 / 50.0);
                let o = g.add(e, l).unwrap();
                let o = g.add(o, r).unwrap();
                (g, o)
            };
            let (g, o) = build(&p);
            let grads = g.backward(o).unwrap().flatten();
            let fd = central_diff(&|q| { let (g, o) = build(q); g.value(o).item() }, &p, 1e-5);
            prop_assert!(max_rel_err(&grads, &fd) < 1e-4);
        }
    }
}
