//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) these fan work out over the
//! rayon pool; without it they are plain loops. Parallelism is only applied
//! across independent output rows or independent work items, never across an
//! accumulation order, so results are bit-identical in both modes and for any
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `width`-sized row of `data`, passing the row index.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Map `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
