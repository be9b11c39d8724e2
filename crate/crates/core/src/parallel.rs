//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these helpers run on the rayon
//! global pool. Without it they are plain iterator loops. Every helper
//! preserves input order in its output, so reductions performed over the
//! returned `Vec` are bit-identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
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

/// Maps `f` over fixed-size chunks of a slice. Chunk boundaries depend only on
/// `chunk_size`, never on the number of worker threads.
pub fn map_chunks<S, T, F>(items: &[S], chunk_size: usize, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&[S]) -> T + Sync + Send,
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

/// Runs two closures, potentially in parallel.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Whether this build dispatches work onto a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
