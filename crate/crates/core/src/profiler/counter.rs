//! Thread-local instrumentation for the engine's tensor ops.
//!
//! Every forward/backward primitive charges its cost here under the frozen
//! convention (MAC = 2 flops, activation = 1 flop per element, backward = 2×
//! the matching forward op). Column traces register the floats they hold
//! while alive, so the peak working set can be observed as well.
//!
//! Counters are per thread; instrumented runs use a single worker.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
    static LIVE_FLOATS: Cell<usize> = const { Cell::new(0) };
    static PEAK_FLOATS: Cell<usize> = const { Cell::new(0) };
    static LIVE_TRACES: Cell<usize> = const { Cell::new(0) };
    static PEAK_TRACES: Cell<usize> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub flops: u64,
    pub peak_trace_floats: usize,
    pub peak_live_traces: usize,
}

pub(crate) fn charge(flops: u64) {
    FLOPS.with(|c| c.set(c.get() + flops));
}

pub(crate) fn trace_alloc(floats: usize) {
    LIVE_FLOATS.with(|live| {
        let now = live.get() + floats;
        live.set(now);
        PEAK_FLOATS.with(|p| p.set(p.get().max(now)));
    });
    LIVE_TRACES.with(|live| {
        let now = live.get() + 1;
        live.set(now);
        PEAK_TRACES.with(|p| p.set(p.get().max(now)));
    });
}

pub(crate) fn trace_free(floats: usize) {
    LIVE_FLOATS.with(|live| live.set(live.get().saturating_sub(floats)));
    LIVE_TRACES.with(|live| live.set(live.get().saturating_sub(1)));
}

/// Runs `f` with fresh counters and reports what it charged on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let saved = (
        FLOPS.with(Cell::take),
        PEAK_FLOATS.with(|p| p.replace(LIVE_FLOATS.with(Cell::get))),
        PEAK_TRACES.with(|p| p.replace(LIVE_TRACES.with(Cell::get))),
    );
    let base_floats = LIVE_FLOATS.with(Cell::get);
    let base_traces = LIVE_TRACES.with(Cell::get);
    let out = f();
    let counts = OpCounts {
        flops: FLOPS.with(Cell::get),
        peak_trace_floats: PEAK_FLOATS.with(Cell::get) - base_floats,
        peak_live_traces: PEAK_TRACES.with(Cell::get) - base_traces,
    };
    FLOPS.with(|c| c.set(saved.0 + counts.flops));
    PEAK_FLOATS.with(|p| p.set(saved.1.max(p.get())));
    PEAK_TRACES.with(|p| p.set(saved.2.max(p.get())));
    (out, counts)
}
