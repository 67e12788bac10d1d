//! Two-sample energy-distance permutation test.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::VerificationReport;
use crate::error::{bail, Result};

pub const MIN_ENERGY_SAMPLES: usize = 256;

/// Rows of `D` computed per block in the permutation pass.
const BLOCK: usize = 32;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn cross_sum(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).sum()
}

/// V-statistic `2 E|a - b| - E|a - a'| - E|b - b'|` over all ordered pairs
/// (diagonals included). Identical inputs give exactly zero.
pub fn energy_statistic(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    2.0 * cross_sum(a, b) / (na * nb) - cross_sum(a, a) / (na * na) - cross_sum(b, b) / (nb * nb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Permutation test of equal distributions. With the pooled distance
/// matrix `D`, row sums `r`, total `T` and a 0/1 membership vector `u` of a
/// relabelled first sample, the three pair sums are `u'Du`, `u'r - u'Du`
/// and `T - 2u'r + u'Du`, so one pass over `D` serves every permutation.
///
/// The p-value is `(1 + #{E_perm >= E_obs}) / (1 + P)`; the test passes
/// when it exceeds `alpha`.
pub fn energy_distance_test<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_permutations: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<VerificationReport> {
    if a.len() < MIN_ENERGY_SAMPLES || b.len() < MIN_ENERGY_SAMPLES {
        bail!(Config, "energy test needs at least {} samples per set, got {} and {}", MIN_ENERGY_SAMPLES, a.len(), b.len());
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(Config, "alpha must lie in (0, 1), got {}", alpha);
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        bail!(Dimension, "energy test samples must share one non-zero dimension");
    }
    let observed = energy_statistic(a, b);
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let n = pooled.len();
    let (na, nb) = (a.len(), b.len());

    let mut masks: Vec<Vec<f64>> = Vec::with_capacity(n_permutations);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..n_permutations {
        idx.shuffle(rng);
        let mut m = alloc::vec![0.0; n];
        for &i in &idx[..na] {
            m[i] = 1.0;
        }
        masks.push(m);
    }

    let mut row_sums = alloc::vec![0.0; n];
    let mut quad = alloc::vec![0.0; n_permutations];
    let mut block = alloc::vec![0.0; BLOCK * n];
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        for i in start..end {
            let row = &mut block[(i - start) * n..(i - start + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = dist(pooled[i], pooled[j]);
            }
            row_sums[i] = row.iter().sum();
        }
        for (mask, q) in masks.iter().zip(quad.iter_mut()) {
            for i in start..end {
                if mask[i] != 0.0 {
                    *q += dot(&block[(i - start) * n..(i - start + 1) * n], mask);
                }
            }
        }
    }
    let total: f64 = row_sums.iter().sum();
    let (fa, fb) = (na as f64, nb as f64);
    let tol = 1e-9 * total / (n * n) as f64;
    let mut exceed = 0usize;
    for (mask, &q) in masks.iter().zip(&quad) {
        let ur = dot(mask, &row_sums);
        let s_ab = ur - q;
        let s_bb = total - 2.0 * ur + q;
        let e = 2.0 * s_ab / (fa * fb) - q / (fa * fa) - s_bb / (fb * fb);
        if e >= observed - tol {
            exceed += 1;
        }
    }
    let p = (1 + exceed) as f64 / (1 + n_permutations) as f64;
    Ok(VerificationReport::new("energy_distance", p > alpha, p, alpha)
        .with("energy", observed)
        .with("p_value", p)
        .with("permutations", n_permutations as f64)
        .with("n_a", fa)
        .with("n_b", fb))
}
