//! Adam with bias-corrected moments.

use alloc::vec::Vec;

use crate::diff::{GradientSet, ParamId};
use crate::error::{bail, Result};
use crate::model::VectorFieldParams;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &VectorFieldParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| alloc::vec![0.0; t.len()])
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters missing from `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut VectorFieldParams, grads: &GradientSet) -> Result<()> {
        if !grads.all_finite() {
            bail!(NonFinite, "gradient holds non-finite values");
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.steps as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.steps as f64);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let gj = g.values()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
