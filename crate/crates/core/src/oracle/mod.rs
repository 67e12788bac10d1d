//! Independent checks of the numerical claims the training methods rely on.
//!
//! Nothing here calls into the code paths it verifies: finite differences
//! only evaluate forward values, the gradient identity recomputes its scale
//! factor from scratch, and the statistical tests work from raw samples.

mod energy;
mod fd;
mod identity;
mod marginal;
mod variance;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

pub use crate::diff::{backward_pass_counter, reset_counter};
pub use energy::{energy_distance_test, energy_statistic, MIN_ENERGY_SAMPLES};
pub use fd::{central_difference, directional_difference, finite_difference_suite, max_relative_error};
pub use identity::{check_grad_identity, reference_lambda, GradIdentityConfig};
pub use marginal::marginal_preservation;
pub use variance::{base_reward_std, variance_decomposition};

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub name: String,
    pub passed: bool,
    /// The quantity compared against `threshold`.
    pub statistic: f64,
    pub threshold: f64,
    pub details: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn new(name: &str, passed: bool, statistic: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            passed,
            statistic,
            threshold,
            details: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    pub fn detail(&self, key: &str) -> Option<f64> {
        self.details.get(key).copied()
    }
}
