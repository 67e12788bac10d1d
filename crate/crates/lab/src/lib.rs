//! Files, configuration and the command line around `flashgrpo-core`.
//!
//! * [`config`]: the TOML run configuration and its validation.
//! * [`checkpoint`]: versioned binary parameter files.
//! * [`metrics`]: per-iteration JSONL metrics and CSV exports.
//! * [`commands`]: `pretrain`, `align`, `verify` and `compare`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod metrics;

pub use error::{LabError, Result};
