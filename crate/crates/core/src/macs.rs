//! Multiply-accumulate counters incremented by the instrumented kernels.
//!
//! Counters are thread-local: a measurement only sees work done on the
//! calling thread.

use std::cell::Cell;

thread_local! {
    static ATTENTION: Cell<u64> = const { Cell::new(0) };
    static PROJECTION: Cell<u64> = const { Cell::new(0) };
}

/// MACs split by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Score (`QKᵀ`) and mix (`attn·V`) products.
    pub attention: u64,
    /// Dense affine maps (projections, FFN, 1×1 convolutions).
    pub projection: u64,
}

pub(crate) fn add_attention(n: u64) {
    ATTENTION.with(|c| c.set(c.get() + n));
}

pub(crate) fn add_projection(n: u64) {
    PROJECTION.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    ATTENTION.with(|c| c.set(0));
    PROJECTION.with(|c| c.set(0));
}

pub fn snapshot() -> MacCount {
    MacCount {
        attention: ATTENTION.with(Cell::get),
        projection: PROJECTION.with(Cell::get),
    }
}

/// Runs `f` and returns the MACs it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCount) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    (
        out,
        MacCount {
            attention: after.attention - before.attention,
            projection: after.projection - before.projection,
        },
    )
}
