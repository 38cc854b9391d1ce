//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan work out over rayon;
//! without it they run sequentially. Results are bit-identical either way:
//! every helper maps independent items and reassembles them in input order,
//! and no floating-point reduction order ever depends on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum items before the parallel path engages; below this the
/// coordination overhead outweighs the work.
const PAR_THRESHOLD: usize = 8;

/// Sequential order-preserving map. Always available; the benchmarks use it
/// as the baseline to compare against the parallel dispatch.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Order-preserving map over a slice, parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if items.len() < PAR_THRESHOLD {
        return map_seq(items, f);
    }
    items.par_iter().map(f).collect()
}

/// Order-preserving map over a slice (sequential fallback).
#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_seq(items, f)
}

/// Enumerated order-preserving map: `f` receives `(index, item)`.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    if items.len() < PAR_THRESHOLD {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Enumerated order-preserving map (sequential fallback).
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Map chunks of `items` (chunk size `chunk`) in parallel, preserving order.
/// Used where per-item dispatch is too fine-grained, e.g. beam decoding.
#[cfg(feature = "parallel")]
pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> Vec<U> + Sync + Send,
{
    let chunk = chunk.max(1);
    if items.len() <= chunk {
        return f(items);
    }
    items
        .par_chunks(chunk)
        .flat_map_iter(|c| f(c).into_iter())
        .collect()
}

/// Map chunks sequentially (fallback).
#[cfg(not(feature = "parallel"))]
pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> Vec<U> + Sync + Send,
{
    let chunk = chunk.max(1);
    items.chunks(chunk).flat_map(|c| f(c).into_iter()).collect()
}

/// Sequential chunk map, the baseline counterpart of [`map_chunks`].
pub fn map_chunks_seq<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    F: Fn(&[T]) -> Vec<U>,
{
    let chunk = chunk.max(1);
    items.chunks(chunk).flat_map(|c| f(c).into_iter()).collect()
}
