//! Thread-local instrumentation counters for the dense kernel.
//!
//! Every matrix product, triangular solve and factorization in [`crate::mat`]
//! reports its scalar multiply/divide count here. The counters make cost
//! claims testable: the backward pass is audited to spend a bounded,
//! step-count-independent number of multiplies per filter step, and the
//! benchmark reports multiply counts next to wall times.

use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Scalar multiplies/divides performed on this thread since the last reset.
pub fn multiplies() -> u64 {
    MULTIPLIES.with(|c| c.get())
}

/// Cholesky factorizations performed on this thread since the last reset.
pub fn factorizations() -> u64 {
    FACTORIZATIONS.with(|c| c.get())
}

/// Reset both counters for the current thread.
pub fn reset() {
    MULTIPLIES.with(|c| c.set(0));
    FACTORIZATIONS.with(|c| c.set(0));
}

pub(crate) fn add_multiplies(n: u64) {
    MULTIPLIES.with(|c| c.set(c.get().wrapping_add(n)));
}

pub(crate) fn add_factorization() {
    FACTORIZATIONS.with(|c| c.set(c.get().wrapping_add(1)));
}
