//! Per-thread floating point operation counter.
//!
//! Every dense kernel (GEMM, convolution, softmax, resampling) reports the
//! number of multiply/add operations it performed. Counts are exact and
//! independent of timing, so they can be compared across configurations.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` operations to the current thread's counter.
#[inline]
pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Current value of the thread's counter.
pub fn current() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the operations it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = current();
    let out = f();
    (out, current().wrapping_sub(start))
}
