//! Data-parallel helpers with a sequential fallback.
//!
//! All helpers preserve input order in their output, so callers can reduce
//! results in a fixed order regardless of how work was scheduled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over fixed-size chunks of `items`. Chunk boundaries depend only on
/// `chunk_size`, never on the number of worker threads.
pub fn map_chunks<T, U, F>(items: &[T], chunk_size: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    let chunk_size = chunk_size.max(1);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk_size).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk_size).map(f).collect()
    }
}

/// Maps `f` over `0..n`.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Whether this build schedules work on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
