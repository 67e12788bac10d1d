//! Process-wide count of transition-kernel gradient evaluations.
//!
//! Every [`Graph::backward`](super::Graph::backward) call adds the number of
//! kernel evaluations its graph declared. The count is the desk-scale proxy
//! for training cost.

use core::sync::atomic::{AtomicU64, Ordering};

static BACKWARD_PASSES: AtomicU64 = AtomicU64::new(0);

pub(crate) fn add(n: u64) {
    BACKWARD_PASSES.fetch_add(n, Ordering::Relaxed);
}

/// Cumulative kernel gradient evaluations since the last reset.
pub fn backward_pass_counter() -> u64 {
    BACKWARD_PASSES.load(Ordering::Relaxed)
}

pub fn reset_counter() {
    BACKWARD_PASSES.store(0, Ordering::Relaxed);
}
