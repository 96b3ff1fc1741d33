//! Batch parallelism with a sequential fallback.
//!
//! Work items (per-mesh forward/backward passes) are independent; results
//! come back in input order and all reductions happen sequentially over that
//! order, so the parallel and sequential paths produce bit-identical output.
//! `workers == 1` forces the sequential path even when the `parallel`
//! feature is enabled.

/// Sizes the global thread pool. `workers == 0` keeps the library default
/// (one thread per core). Calling this more than once is a no-op after the
/// first effective call; errors from re-initialization are ignored.
#[cfg(feature = "parallel")]
pub fn configure_workers(workers: usize) {
    if workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_workers: usize) {}

/// Maps `f` over `items`, returning outputs in input order.
#[cfg(feature = "parallel")]
pub fn map_indexed<I, O, F>(workers: usize, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    use rayon::prelude::*;
    if workers == 1 {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items
            .par_iter()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<I, O, F>(_workers: usize, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
