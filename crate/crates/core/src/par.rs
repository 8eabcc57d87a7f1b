//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split at fixed chunk boundaries and partial results are
//! combined in chunk order, so a parallel run is bitwise identical to a
//! sequential one. With the `parallel` feature disabled everything runs on
//! the calling thread; with it enabled, [`set_parallel`] can still force the
//! sequential path at runtime (the benches use this to compare both).

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk`] but collects one result per chunk, in chunk order.
pub fn map_chunks<T, R, F>(data: &mut [T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return Vec::new();
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return data.par_chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect();
    }
    data.chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Evaluates `f(i)` for `i in 0..n`, results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
