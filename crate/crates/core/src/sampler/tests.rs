use super::*;
use crate::diff::Graph;
use crate::model::Arch;
use crate::rng::{normal_vec, seeded};
use crate::Error;
use alloc::vec;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(20, 0.7, 1e-3).unwrap()
}

fn model(seed: u64) -> VectorFieldParams {
    VectorFieldParams::init(seed, Arch { width: 16, depth: 2, ..Arch::default() }).unwrap()
}

/// Linear model whose class-0 velocity is `[1, 0]` and whose unconditional
/// velocity is zero.
fn guided_probe() -> VectorFieldParams {
    let arch = Arch { width: 1, depth: 0, ..Arch::default() };
    let mut p = VectorFieldParams::zeros(arch).unwrap();
    // table is [embed=8, classes+1=3]; entry (0, class 0)
    p.tensors_mut()[0].values_mut()[0] = 1.0;
    // output weight [2, 26]; row 0 reads embedding feature 0 at column 18
    p.tensors_mut()[1].values_mut()[18] = 1.0;
    p
}

#[test]
fn zero_params_ode_step_is_identity() {
    let p = VectorFieldParams::zeros(Arch::default()).unwrap();
    let x = [0.4, -2.0];
    assert_eq!(ode_step(&p, &x, 0.5, 0.05, Cond::Class(0), 4.5).unwrap(), x.to_vec());
}

#[test]
fn unit_velocity_euler_step() {
    let arch = Arch { dim: 1, width: 1, depth: 0, classes: 1, embed: 1 };
    let mut p = VectorFieldParams::zeros(arch).unwrap();
    p.tensors_mut()[2].values_mut()[0] = 1.0; // output bias
    let out = ode_step(&p, &[0.0], 0.5, 0.1, Cond::Class(0), 1.0).unwrap();
    assert_eq!(out, vec![-0.1]);
}

#[test]
fn cfg_combination() {
    let p = model(3);
    let x = [0.3, 0.1];
    let vc = velocity_rows(&p, &x, &[0.4], &[Cond::Class(1)]).unwrap();
    let vu = velocity_rows(&p, &x, &[0.4], &[Cond::Uncond]).unwrap();
    assert_eq!(cfg_velocity(&p, &x, 0.4, Cond::Class(1), 1.0).unwrap(), vc);
    assert_eq!(cfg_velocity(&p, &x, 0.4, Cond::Class(1), 0.0).unwrap(), vu);

    let probe = guided_probe();
    assert_eq!(velocity_rows(&probe, &x, &[0.4], &[Cond::Class(0)]).unwrap(), vec![1.0, 0.0]);
    assert_eq!(velocity_rows(&probe, &x, &[0.4], &[Cond::Uncond]).unwrap(), vec![0.0, 0.0]);
    assert_eq!(cfg_velocity(&probe, &x, 0.4, Cond::Class(0), 4.5).unwrap(), vec![4.5, 0.0]);
    assert!(cfg_velocity(&p, &x, 0.4, Cond::Class(0), -1.0).is_err());
}

#[test]
fn mean_without_noise_is_ode_step() {
    let p = model(5);
    let x = [0.7, -0.2];
    let ode = ode_step(&p, &x, 0.6, 0.05, Cond::Class(0), 4.5).unwrap();
    let mu = transition_mean(&p, &x, 0.6, 0.05, Cond::Class(0), 0.0, 4.5).unwrap();
    assert_eq!(mu, ode);
}

#[test]
fn zero_model_mean_has_only_drift_correction() {
    let p = VectorFieldParams::zeros(Arch::default()).unwrap();
    let x = [1.2, -0.8];
    let (t, sigma, dt) = (0.5, 0.3, 0.05);
    let mu = transition_mean(&p, &x, t, dt, Cond::Class(1), sigma, 4.5).unwrap();
    // v = 0: mu = x - dt * sigma^2/(2t) * x = 0.9955 x
    for (m, xi) in mu.iter().zip(&x) {
        assert!((m - 0.9955 * xi).abs() < 1e-15);
    }
    assert!(matches!(
        transition_mean(&p, &x, 0.0, dt, Cond::Class(1), sigma, 1.0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn gaussian_log_density_examples() {
    let mu = [0.25, -1.0, 3.0];
    let expect = -1.5 * libm::log(2.0 * PI * 0.04 * 0.1);
    assert!((transition_log_prob(&mu, 0.2, 0.1, &mu).unwrap() - expect).abs() < 1e-12);
    // standard normal density at 1: -0.5 ln(2 pi) - 0.5
    let lp = transition_log_prob(&[0.0], 1.0, 1.0, &[1.0]).unwrap();
    assert!((lp - (-1.418_938_533_204_672_7)).abs() < 1e-12);
    let d = [0.3, -0.4, 0.1];
    let plus: Vec<f64> = mu.iter().zip(&d).map(|(m, e)| m + e).collect();
    let minus: Vec<f64> = mu.iter().zip(&d).map(|(m, e)| m - e).collect();
    let (a, b) = (
        transition_log_prob(&mu, 0.5, 0.05, &plus).unwrap(),
        transition_log_prob(&mu, 0.5, 0.05, &minus).unwrap(),
    );
    assert!((a - b).abs() < 1e-12);
    assert!(matches!(transition_log_prob(&mu, 0.0, 0.1, &mu), Err(Error::Domain(_))));
}

#[test]
fn sde_step_without_noise_returns_mean() {
    let p = model(6);
    let x = [0.1, 0.9];
    let mu = transition_mean(&p, &x, 0.3, 0.05, Cond::Class(0), 0.4, 4.5).unwrap();
    let (next, _) = sde_step(&p, &x, 0.3, 0.05, Cond::Class(0), 0.4, &[0.0, 0.0], 4.5).unwrap();
    assert_eq!(next, mu);
    let (tiny, _) = sde_step(&p, &x, 0.3, 0.05, Cond::Class(0), 1e-9, &[1.3, -0.7], 4.5).unwrap();
    let ode = ode_step(&p, &x, 0.3, 0.05, Cond::Class(0), 4.5).unwrap();
    for (a, b) in tiny.iter().zip(&ode) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn mixed_rollout_matches_ode_prefix_and_is_deterministic() {
    let p = model(7);
    let s = schedule();
    let x0 = normal_vec(&mut seeded(1), 2);
    let ode = rollout_ode(&p, &x0, &s, Cond::Class(1), 4.5).unwrap();
    let k = 8;
    let a = rollout_mixed(&p, &x0, &s, k, Cond::Class(1), 4.5, &mut seeded(99)).unwrap();
    let b = rollout_mixed(&p, &x0, &s, k, Cond::Class(1), 4.5, &mut seeded(99)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.states.len(), 21);
    assert_eq!(a.records.len(), 1);
    // states x_{t_T} .. x_{t_k} come before the SDE transition
    let before = s.steps() - k + 1;
    assert_eq!(a.states[..before], ode.states[..before]);
    assert_ne!(a.states[before], ode.states[before]);
    assert_eq!(a.record_at(k).unwrap().x_t, ode.states[before - 1]);
}

#[test]
fn forced_zero_noise_differs_only_by_drift_correction() {
    let p = model(8);
    let s = schedule();
    let x0 = normal_vec(&mut seeded(2), 2);
    let k = 12;
    let mixed = rollout_batch_with(&p, core::slice::from_ref(&x0), &[Cond::Class(0)], &[SdePlan::Single(k)], &s, 4.5, &mut |d| {
        vec![0.0; d]
    })
    .unwrap()
    .remove(0);
    let ode = rollout_ode(&p, &x0, &s, Cond::Class(0), 4.5).unwrap();
    let idx = s.steps() - k;
    let x = &ode.states[idx];
    let step = s.step(k);
    let v = cfg_velocity(&p, x, step.t, Cond::Class(0), 4.5).unwrap();
    let kk = step.sigma * step.sigma / (2.0 * step.t);
    for j in 0..2 {
        let corr = (x[j] + v[j] * (1.0 - step.t)) * kk * step.dt;
        let expected = ode.states[idx + 1][j] - corr;
        assert!((mixed.states[idx + 1][j] - expected).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_step_is_contract_error() {
    let p = model(1);
    let s = schedule();
    for k in [0, 21] {
        let r = rollout_mixed(&p, &[0.0, 0.0], &s, k, Cond::Class(0), 1.0, &mut seeded(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}

#[test]
fn baseline_record_counts() {
    let p = model(2);
    let s = schedule();
    let x0 = [0.5, 0.5];
    let half = rollout_baseline(&p, &x0, &s, BaselineMode::FirstHalfSde, Cond::Class(0), 4.5, &mut seeded(3)).unwrap();
    assert_eq!(half.records.len(), 10);
    assert!(half.records.iter().all(|r| r.step > 10));
    let full = rollout_baseline(&p, &x0, &s, BaselineMode::FullSde, Cond::Class(0), 4.5, &mut seeded(3)).unwrap();
    assert_eq!(full.records.len(), 20);
    assert_eq!(SdePlan::FirstHalf.sde_steps(&s), 10);
    assert_eq!(SdePlan::Full.sde_steps(&s), 20);
    assert_eq!(SdePlan::Ode.sde_steps(&s), 0);
}

#[test]
fn vanishing_noise_baseline_tracks_ode() {
    let p = model(4);
    let s = schedule().with_sigma_scaled(1e-12).unwrap();
    let x0 = [-0.3, 1.1];
    let full = rollout_baseline(&p, &x0, &s, BaselineMode::FullSde, Cond::Class(1), 4.5, &mut seeded(5)).unwrap();
    let ode = rollout_ode(&p, &x0, &s, Cond::Class(1), 4.5).unwrap();
    for (a, b) in full.final_sample.iter().zip(&ode.final_sample) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn stored_noise_is_recoverable() {
    let p = model(11);
    let s = schedule();
    let mut rng = seeded(4);
    let init: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut rng, 2)).collect();
    let conds = [Cond::Class(0), Cond::Class(1), Cond::Class(0), Cond::Class(1), Cond::Class(0), Cond::Class(1)];
    let plans = [SdePlan::Full, SdePlan::FirstHalf, SdePlan::Single(1), SdePlan::Single(20), SdePlan::Single(7), SdePlan::Ode];
    let trajs = rollout_batch(&p, &init, &conds, &plans, &s, 4.5, &mut rng).unwrap();
    for tr in &trajs {
        assert_eq!(tr.states.len(), 21);
        for rec in &tr.records {
            let eps = solve_eps(&p, tr.cond, rec, 4.5).unwrap();
            for (a, b) in eps.iter().zip(&rec.eps) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
    assert!(trajs[5].records.is_empty());
}

#[test]
fn graph_kernel_matches_plain_kernel_bitwise() {
    let p = model(12);
    let s = schedule();
    let mut rng = seeded(8);
    let init: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, 2)).collect();
    let conds = [Cond::Class(0), Cond::Class(1), Cond::Class(1), Cond::Class(0)];
    let plans = [SdePlan::Single(3), SdePlan::Single(19), SdePlan::Single(20), SdePlan::Single(1)];
    for scale in [0.0, 1.0, 4.5] {
        let trajs = rollout_batch(&p, &init, &conds, &plans, &s, scale, &mut rng).unwrap();
        let mut rows = KernelRows::new(2);
        for tr in &trajs {
            rows.push(&tr.records[0], tr.cond).unwrap();
        }
        let mut g = Graph::new();
        let nodes = p.register(&mut g);
        let mu = transition_mean_graph(&mut g, &p, &nodes, &rows, scale).unwrap();
        let lp = log_prob_graph(&mut g, mu, &rows).unwrap();
        for (r, tr) in trajs.iter().enumerate() {
            let rec = &tr.records[0];
            let plain = transition_mean(&p, &rec.x_t, rec.t, rec.dt, tr.cond, rec.sigma, scale).unwrap();
            assert_eq!(&g.value(mu).values()[2 * r..2 * r + 2], plain.as_slice());
            assert_eq!(g.value(lp).values()[r], rec.log_prob_old);
        }
    }
}
