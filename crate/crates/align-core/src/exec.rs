//! Data-parallel execution helpers with a sequential fallback.
//!
//! Every parallel site in the crate maps independent work items to partial
//! results and then reduces them sequentially in input order. Because the
//! reduction order is fixed, results are bit-identical whether the map ran
//! on rayon or on the current thread, which keeps metrics reproducible.
//!
//! With the `parallel` feature disabled rayon is not compiled in at all.
//! With it enabled (the default), [`set_parallel`] can switch to the
//! sequential path at runtime; the benches use this to compare both modes
//! in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. No-op without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

/// True when work will actually be dispatched to rayon.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Map `f` over `items`, preserving input order in the output.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::Relaxed) {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(f).collect()
}

/// Map `f` over fixed-size chunks of `items`, preserving chunk order.
///
/// The chunk size is part of the result's numeric identity: partial sums are
/// folded chunk-by-chunk in order, so the same chunk size must be used by
/// both execution modes (it is — the constant lives at the call site).
pub fn ordered_chunk_map<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if PARALLEL.load(Ordering::Relaxed) {
        return items.par_chunks(chunk).map(&f).collect();
    }
    items.chunks(chunk).map(f).collect()
}
