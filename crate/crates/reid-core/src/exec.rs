//! Row-parallel execution helpers.
//!
//! With the `parallel` feature these fan out over the current rayon pool;
//! without it they degrade to plain sequential iteration. Every caller
//! computes each output element independently of scheduling order, so the
//! two paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every `chunk`-sized window of `data`, passing the chunk index.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Collect `f(0..n)` into a vector, preserving index order.
pub(crate) fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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
