//! Thread-local operation counters for complexity measurements.
//!
//! Counting is always on; it is a handful of integer adds per attention call.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Query-key score evaluations in self-attention.
    pub self_attention: u64,
    /// Query-key score evaluations in encoder-decoder attention.
    pub cross_attention: u64,
    /// Frames consumed by the integrate-and-fire accumulator.
    pub cif_steps: u64,
    /// Single-position decoder steps (any model).
    pub decoder_steps: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts {
        self_attention: 0,
        cross_attention: 0,
        cif_steps: 0,
        decoder_steps: 0,
    }) };
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub(crate) fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Runs `f` and returns the counts it accumulated on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    (
        out,
        OpCounts {
            self_attention: after.self_attention - before.self_attention,
            cross_attention: after.cross_attention - before.cross_attention,
            cif_steps: after.cif_steps - before.cif_steps,
            decoder_steps: after.decoder_steps - before.decoder_steps,
        },
    )
}
