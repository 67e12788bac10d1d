//! Single-timestep group-relative policy optimization for flow-matching
//! generators, at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece
//! of the lab: a small reverse-mode autodiff ([`diff`]), the conditional
//! vector field and its flow-matching pretraining ([`model`]), the
//! denoising schedule ([`schedule`]), ODE/SDE samplers ([`sampler`]),
//! reward functions ([`rewards`]), the GRPO family of losses and the
//! training step ([`grpo`]), and independent verification oracles
//! ([`oracle`]). File formats, configuration and the command line live in
//! the companion `flashgrpo-lab` crate.
#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diff;
mod error;
pub mod grpo;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};

/// Monotonic time source used to stamp training metrics.
///
/// The core crate has no access to a system clock; callers supply one.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// A clock that always reads zero. Useful when wall time is irrelevant.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}
