use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::rng::normal;

/// Target distribution for one prompt class: an equal-weight isotropic
/// Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClassSpec {
    pub means: Vec<Vec<f64>>,
    /// Index into `means` of the mode the reward prefers.
    pub preferred: usize,
}

/// Synthetic conditional data: one mixture per prompt class, shared
/// component standard deviation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DataSpec {
    pub dim: usize,
    pub std: f64,
    pub classes: Vec<ClassSpec>,
}

impl Default for DataSpec {
    /// Two classes in 2D. Class 0 has modes at (-1, 1) and (1, 1), preferring
    /// the left one; class 1 has modes at (-1, -1) and (1, -1), preferring the
    /// right one.
    fn default() -> Self {
        Self {
            dim: 2,
            std: 0.15,
            classes: vec![
                ClassSpec {
                    means: vec![vec![-1.0, 1.0], vec![1.0, 1.0]],
                    preferred: 0,
                },
                ClassSpec {
                    means: vec![vec![-1.0, -1.0], vec![1.0, -1.0]],
                    preferred: 1,
                },
            ],
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            bail!(Config, "data spec needs at least one class");
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            bail!(Config, "mixture std must be positive, got {}", self.std);
        }
        for (c, class) in self.classes.iter().enumerate() {
            if class.means.len() < 2 {
                bail!(Config, "class {} needs at least 2 mixture components", c);
            }
            if class.preferred >= class.means.len() {
                bail!(Config, "class {} preferred mode {} out of range", c, class.preferred);
            }
            if let Some(m) = class.means.iter().find(|m| m.len() != self.dim) {
                bail!(Config, "class {} has a mean of dimension {} (expected {})", c, m.len(), self.dim);
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn preferred_mean(&self, class: usize) -> &[f64] {
        let c = &self.classes[class];
        &c.means[c.preferred]
    }

    /// One draw from the mixture of `class`.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let spec = &self.classes[class];
        let mean = &spec.means[rng.random_range(0..spec.means.len())];
        mean.iter().map(|m| m + self.std * normal(rng)).collect()
    }
}
