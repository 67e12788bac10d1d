//! Central finite differences and the per-operation gradient suite.

use alloc::vec::Vec;

use rand::Rng;

use super::VerificationReport;
use crate::diff::{Graph, NodeId, ParamId, Tensor};
use crate::error::Result;
use crate::grpo::{collect_groups, flash_loss, AlignConfig, LossSettings, Method};
use crate::model::{velocity_graph, Arch, Cond, DataSpec, VectorFieldParams};
use crate::rewards::RewardSpec;
use crate::rng::{normal_vec, seeded};
use crate::sampler::{log_prob_graph, transition_mean_graph, KernelRows, TransitionRecord};
use crate::schedule::NoiseSchedule;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central difference of a vector-valued `f` along direction `u`.
pub fn directional_difference(
    f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    u: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let plus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - h * b).collect();
    let (up, down) = (f(&plus)?, f(&minus)?);
    Ok(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// `max |a - b| / max |b|`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type Builder<'a> = dyn Fn(&[f64]) -> Result<(Graph, NodeId)> + 'a;

fn compare(
    name: &str,
    x0: &[f64],
    auto: &[f64],
    value: &dyn Fn(&[f64]) -> Result<f64>,
    h: f64,
    tol: f64,
) -> Result<VerificationReport> {
    let fd = central_difference(&mut |x| value(x), x0, h)?;
    let err = max_relative_error(auto, &fd);
    Ok(VerificationReport::new(name, err <= tol, err, tol).with("parameters", x0.len() as f64))
}

fn check(name: &str, x0: &[f64], build: &Builder<'_>, h: f64, tol: f64) -> Result<VerificationReport> {
    let (g, out) = build(x0)?;
    let auto = g.backward(out)?.flatten();
    let value = |x: &[f64]| -> Result<f64> {
        let (g, o) = build(x)?;
        Ok(g.value(o).item())
    };
    compare(name, x0, &auto, &value, h, tol)
}

fn leaves(g: &mut Graph, flat: &[f64], shapes: &[&[usize]]) -> Result<Vec<NodeId>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        out.push(g.param(ParamId(i), Tensor::new(s.to_vec(), flat[offset..offset + n].to_vec())?));
        offset += n;
    }
    Ok(out)
}

/// Contracts a node with fixed weights so every output element matters.
fn reduce(g: &mut Graph, y: NodeId, weights: &[f64]) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let n = g.value(y).len();
    let w = g.constant(Tensor::new(shape, weights[..n].to_vec())?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central-difference check (step `h`) of every differentiable operation
/// and of the composite model, kernel and loss expressions.
pub fn finite_difference_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<VerificationReport>> {
    let mut rng = seeded(seed);
    let w: Vec<f64> = uniform(&mut rng, 64, -1.0, 1.0);
    let mut reports = Vec::new();
    let mut op = |name: &str,
                  shapes: &[&[usize]],
                  positive: bool,
                  f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
                  rng: &mut crate::rng::ChaCha8Rng|
     -> Result<()> {
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let x0 = if positive { uniform(rng, n, 0.5, 2.0) } else { uniform(rng, n, -1.0, 1.0) };
        let build = |x: &[f64]| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let l = leaves(&mut g, x, shapes)?;
            let y = f(&mut g, &l)?;
            let out = if g.value(y).is_scalar() { y } else { reduce(&mut g, y, &w)? };
            Ok((g, out))
        };
        reports.push(check(name, &x0, &build, h, tol)?);
        Ok(())
    };
    op("affine", &[&[5, 4], &[3, 4], &[3]], false, &|g, l| g.affine(l[0], l[1], l[2]), &mut rng)?;
    op("tanh", &[&[3, 4]], false, &|g, l| Ok(g.tanh(l[0])), &mut rng)?;
    op("add", &[&[2, 3], &[2, 3]], false, &|g, l| g.add(l[0], l[1]), &mut rng)?;
    op("sub", &[&[2, 3], &[2, 3]], false, &|g, l| g.sub(l[0], l[1]), &mut rng)?;
    op("mul", &[&[2, 3], &[2, 3]], false, &|g, l| g.mul(l[0], l[1]), &mut rng)?;
    op("scale", &[&[6]], false, &|g, l| Ok(g.scale(l[0], -1.7)), &mut rng)?;
    op(
        "shift",
        &[&[6]],
        false,
        &|g, l| {
            let s = g.shift(l[0], 0.3);
            Ok(g.tanh(s))
        },
        &mut rng,
    )?;
    op("scale_by", &[&[2, 3], &[]], false, &|g, l| g.scale_by(l[0], l[1]), &mut rng)?;
    op(
        "sum",
        &[&[7]],
        false,
        &|g, l| {
            let s = g.sum(l[0]);
            g.mul(s, s)
        },
        &mut rng,
    )?;
    op("sum_rows", &[&[3, 4]], false, &|g, l| g.sum_rows(l[0]), &mut rng)?;
    op("squared_norm", &[&[5]], false, &|g, l| Ok(g.squared_norm(l[0])), &mut rng)?;
    op("exp", &[&[4]], false, &|g, l| Ok(g.exp(l[0])), &mut rng)?;
    op("log", &[&[4]], true, &|g, l| g.log(l[0]), &mut rng)?;
    op(
        "concat",
        &[&[3, 2], &[3, 4]],
        false,
        &|g, l| {
            let c = g.concat(l[0], l[1])?;
            Ok(g.tanh(c))
        },
        &mut rng,
    )?;

    // composite expressions on a small model
    let arch = Arch {
        width: 8,
        depth: 2,
        ..Arch::default()
    };
    let base = VectorFieldParams::init(seed, arch)?;
    let x0 = base.flatten();
    let rows = 4;
    let xs: Vec<f64> = uniform(&mut rng, rows * arch.dim, -1.5, 1.5);
    let ts: Vec<f64> = uniform(&mut rng, rows, 0.05, 0.95);
    let conds = [Cond::Class(0), Cond::Class(1), Cond::Uncond, Cond::Class(1)];
    let build = |flat: &[f64]| -> Result<(Graph, NodeId)> {
        let p = base.with_flat(flat)?;
        let mut g = Graph::new();
        let nodes = p.register(&mut g);
        let x = g.constant(Tensor::matrix(rows, arch.dim, xs.clone())?);
        let v = velocity_graph(&mut g, &p, &nodes, x, &ts, &conds)?;
        let out = reduce(&mut g, v, &w)?;
        Ok((g, out))
    };
    reports.push(check("velocity", &x0, &build, h, tol)?);

    let schedule = NoiseSchedule::new(20, 0.7, 1e-3)?;
    let mut kr = KernelRows::new(arch.dim);
    for (r, &cond) in conds.iter().enumerate().take(rows) {
        let step = schedule.step(3 + 5 * r);
        let x_t = normal_vec(&mut rng, arch.dim);
        let x_next: Vec<f64> = x_t.iter().map(|v| v * 0.97 + 0.01).collect();
        let rec = TransitionRecord {
            step: step.index,
            t: step.t,
            dt: step.dt,
            sigma: step.sigma,
            lambda: step.lambda,
            x_t,
            x_next,
            eps: alloc::vec![0.0; arch.dim],
            log_prob_old: 0.0,
        };
        kr.push(&rec, cond)?;
    }
    let build = |flat: &[f64]| -> Result<(Graph, NodeId)> {
        let p = base.with_flat(flat)?;
        let mut g = Graph::new();
        let nodes = p.register(&mut g);
        let mu = transition_mean_graph(&mut g, &p, &nodes, &kr, 4.5)?;
        let lp = log_prob_graph(&mut g, mu, &kr)?;
        let out = reduce(&mut g, lp, &w)?;
        Ok((g, out))
    };
    reports.push(check("transition_log_prob", &x0, &build, h, tol)?);

    let reward = RewardSpec::mode_preference(&DataSpec::default(), 1.0);
    let config = AlignConfig {
        eval_every: 0,
        ..AlignConfig::default()
    };
    let groups = collect_groups(&base, Method::Flash, &config, &schedule, &reward, 0, &mut rng)?;
    let settings = LossSettings {
        eps_clip: 0.2,
        ..LossSettings::default()
    };
    let auto = flash_loss(&base, &groups, &schedule, &settings, None)?.backward()?.flatten();
    let value = |flat: &[f64]| -> Result<f64> {
        let p = base.with_flat(flat)?;
        Ok(flash_loss(&p, &groups, &schedule, &settings, None)?.value())
    };
    reports.push(compare("flash_loss", &x0, &auto, &value, h, tol)?);
    Ok(reports)
}
