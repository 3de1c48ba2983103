//! Data-parallel helpers with a sequential fallback.
//!
//! Trials, attack runs, and probe sweeps are embarrassingly parallel; the
//! `parallel` feature (on by default) maps them across a rayon pool. Results
//! are always collected in index order and reductions happen sequentially
//! afterwards, so output bits do not depend on the feature or thread count.
//! The `_seq` variants are always compiled, which lets the bench suite compare
//! both paths in a single build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    map_indexed_seq(n, f)
}

/// Sequential reference path for [`map_indexed`].
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Map `f` over the items of a slice, collecting results in item order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over the items of a slice, collecting results in item order.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Apply `f` to each `width`-sized row of `data` in parallel. Every row is
/// written by exactly one task, so results are bit-identical to the
/// sequential path.
#[cfg(feature = "parallel")]
pub fn for_each_row<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Apply `f` to each `width`-sized row of `data`.
#[cfg(not(feature = "parallel"))]
pub fn for_each_row<T, F>(data: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}
