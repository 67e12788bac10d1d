//! Conditional vector field `v(x, t, c)` and its flow-matching pretraining.
//!
//! The network is an MLP over `[x, fourier(t), embed(c)]`. The condition
//! embedding table has one column per prompt class plus a final
//! "unconditional" column used for classifier-free guidance.

mod data;
mod net;
mod pretrain;

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, NodeId, ParamId, Tensor};
use crate::error::{bail, Result};

pub use data::{ClassSpec, DataSpec};
pub use net::{time_features, velocity_graph, velocity_rows, TIME_FEATURES, TIME_FREQUENCIES};
pub use pretrain::{fm_pretrain, interpolate, PretrainConfig, PretrainOutcome};

/// Condition passed to the vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Cond {
    Class(usize),
    Uncond,
}

/// Shape of the vector-field network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Arch {
    /// Data dimension `d`.
    pub dim: usize,
    /// Hidden width.
    pub width: usize,
    /// Number of hidden `tanh` layers; zero gives a linear model.
    pub depth: usize,
    /// Number of prompt classes (the embedding table has one extra column).
    pub classes: usize,
    /// Condition embedding size.
    pub embed: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            dim: 2,
            width: 64,
            depth: 3,
            classes: 2,
            embed: 8,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            bail!(Config, "hidden width must be positive");
        }
        if self.dim == 0 || self.classes == 0 || self.embed == 0 {
            bail!(
                Config,
                "dim, classes and embed must be positive (dim={}, classes={}, embed={})",
                self.dim,
                self.classes,
                self.embed
            );
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES + self.embed
    }

    /// `(rows, cols)` of every parameter tensor in [`ParamId`] order. Biases
    /// are reported with `cols == 0`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * self.depth + 3);
        shapes.push(alloc::vec![self.embed, self.classes + 1]);
        let mut fan_in = self.input_width();
        for _ in 0..self.depth {
            shapes.push(alloc::vec![self.width, fan_in]);
            shapes.push(alloc::vec![self.width]);
            fan_in = self.width;
        }
        shapes.push(alloc::vec![self.dim, fan_in]);
        shapes.push(alloc::vec![self.dim]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn check_cond(&self, c: Cond) -> Result<()> {
        match c {
            Cond::Class(k) if k >= self.classes => {
                bail!(Lookup, "unknown condition class {} (have {})", k, self.classes)
            }
            _ => Ok(()),
        }
    }

    /// Column of the embedding table used for `c`.
    pub(crate) fn cond_column(&self, c: Cond) -> usize {
        match c {
            Cond::Class(k) => k,
            Cond::Uncond => self.classes,
        }
    }
}

/// All learnable weights of the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldParams {
    arch: Arch,
    seed: u64,
    tensors: Vec<Tensor>,
}

impl VectorFieldParams {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// fan-in `n` is drawn from `U(-1/sqrt(n), 1/sqrt(n))`; embedding entries
    /// from `U(-1, 1)`.
    pub fn init(seed: u64, arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.tensor_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut bound = 1.0;
        for (i, shape) in shapes.iter().enumerate() {
            if i > 0 && shape.len() == 2 {
                bound = 1.0 / libm::sqrt(shape[1] as f64);
            }
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.push(Tensor::new(shape.clone(), values)?);
        }
        Ok(Self { arch, seed, tensors })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.tensor_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            arch,
            seed: 0,
            tensors,
        })
    }

    /// Rebuilds parameters from raw tensors, checking every shape.
    pub fn from_tensors(arch: Arch, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.tensor_shapes();
        if shapes.len() != tensors.len() {
            bail!(Dimension, "expected {} tensors, got {}", shapes.len(), tensors.len());
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.as_slice() != t.shape() {
                bail!(Dimension, "tensor {} has shape {:?}, expected {:?}", i, t.shape(), s);
            }
            if !t.all_finite() {
                bail!(NonFinite, "tensor {} holds non-finite values", i);
            }
        }
        Ok(Self { arch, seed, tensors })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    /// Copy with all values replaced from a flat vector in [`flatten`] order.
    ///
    /// [`flatten`]: Self::flatten
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            bail!(Dimension, "flat vector has {} values, expected {}", flat.len(), self.param_count());
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors.iter_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every tensor as a parameter leaf of `g`.
    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            nodes: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(ParamId(i), t.clone()))
                .collect(),
        }
    }
}

/// Graph handles for the parameter leaves of one [`VectorFieldParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub(crate) fn get(&self, i: usize) -> NodeId {
        self.nodes[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = VectorFieldParams::init(42, Arch::default()).unwrap();
        let b = VectorFieldParams::init(42, Arch::default()).unwrap();
        let c = VectorFieldParams::init(43, Arch::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn zero_width_is_config_error() {
        let arch = Arch {
            width: 0,
            ..Arch::default()
        };
        assert!(matches!(VectorFieldParams::init(0, arch), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_matches_closed_form() {
        // d=2, width=64, depth=3, 2 classes, embed 8, 16 time features:
        // table 8*3, first layer 64*(2+16+8)+64, two hidden 64*64+64,
        // output 2*64+2.
        let arch = Arch::default();
        let expected = 8 * 3 + (64 * 26 + 64) + 2 * (64 * 64 + 64) + (2 * 64 + 2);
        assert_eq!(expected, 10_202);
        assert_eq!(arch.param_count(), expected);
        assert_eq!(VectorFieldParams::init(1, arch).unwrap().param_count(), expected);
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        let p = VectorFieldParams::init(3, Arch::default()).unwrap();
        let bound = 1.0 / libm::sqrt(26.0);
        assert!(p.tensors()[1].values().iter().all(|v| v.abs() < bound));
        assert!(p.tensors()[0].values().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = VectorFieldParams::init(5, Arch::default()).unwrap();
        assert_eq!(p.with_flat(&p.flatten()).unwrap(), p);
        assert!(p.with_flat(&[0.0; 3]).is_err());
    }
}
