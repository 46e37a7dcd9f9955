//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they degrade to plain sequential iteration. Both paths produce results in
//! input order, so outputs are bit-identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Bound worker parallelism (no-op without the `parallel` feature). Must be
/// called before any parallel work runs.
#[cfg(feature = "parallel")]
pub fn set_worker_threads(n: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn set_worker_threads(_n: usize) -> std::result::Result<(), String> {
    Ok(())
}

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Map `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant of [`map_range`], kept for benchmark
/// comparisons against the parallel path.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Apply `f` to disjoint mutable chunks of `data`, chunk index attached.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_matches_sequential() {
        let a = map_range(100, |i| i * i);
        let b = map_range_seq(100, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn chunk_indices_line_up() {
        let mut v = vec![0usize; 12];
        for_each_chunk_mut(&mut v, 4, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
