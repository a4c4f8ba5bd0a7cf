//! Data-parallel dispatch with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it everything runs on the calling thread. Results are always
//! returned in index order so reductions downstream are schedule independent.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f(0..len)` and collect the results in index order.
pub fn map_indexed<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Number of worker threads the engine will use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    let n = rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    let n = 1;
    n
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
