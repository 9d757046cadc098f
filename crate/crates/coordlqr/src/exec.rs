//! Parallel/sequential execution seam.
//!
//! With the `parallel` feature the mappers fan out over rayon; without it
//! they degrade to plain iteration. Results are collected in input order
//! either way, so callers see identical values regardless of the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items below this count are not worth splitting in the fine-grained
/// mapper; larger inputs are handed to rayon in chunks of this size. The
/// per-item work is a handful of small matrix products, so the crossover
/// sits at large ensembles (see the throughput bench for the comparison on
/// a given machine).
#[cfg(feature = "parallel")]
const FINE_CHUNK: usize = 1024;

/// Maps `f` over `0..count` where each item is substantial work (an entire
/// verification instance). Every item becomes its own task.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..count).map(f).collect()
}

/// Maps `f` over `0..count` where each item is cheap (one subsystem
/// update). Work is split in coarse chunks so dispatch overhead stays
/// negligible, and small inputs run inline.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed_fine<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    if count <= FINE_CHUNK {
        return (0..count).map(f).collect();
    }
    (0..count)
        .into_par_iter()
        .with_min_len(FINE_CHUNK)
        .map(f)
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed_fine<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..count).map(f).collect()
}
