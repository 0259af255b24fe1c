//! Data-parallel execution helpers.
//!
//! Every kernel in the crate goes through these helpers so that the
//! `parallel` feature only changes *where* work runs, never the result:
//! row maps are index-ordered, and reductions use a fixed chunk size whose
//! partial results are combined left to right on the calling thread.
//!
//! [`sequential`] forces the single-threaded path for the duration of a
//! closure, which is what the benchmark suite uses to compare both paths in
//! one binary.

use std::cell::Cell;

/// Rows per reduction chunk. Part of the numerical contract: changing it
/// changes the floating-point summation order.
pub const REDUCE_CHUNK: usize = 512;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all kernels dispatched from this thread on the sequential path.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _guard = Restore(prev);
    f()
}

/// True when kernels dispatched from this thread will use rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fills an `n × width` row-major buffer, one row per call to `f(j, row)`.
pub fn fill_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut out = vec![0.0; n * width];
    if width == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(j, row)| f(j, row));
            return out;
        }
    }
    out.chunks_mut(width).enumerate().for_each(|(j, row)| f(j, row));
    out
}

/// Maps over a slice of independent tasks (fits, sessions, seeds).
pub fn map_tasks<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Chunked reduction over `0..n`.
///
/// `chunk` folds the half-open range it is given into a partial result and
/// `combine` merges partials. Chunk boundaries are fixed at multiples of
/// [`REDUCE_CHUNK`] and partials are combined in ascending order, so the
/// result does not depend on the thread count.
pub fn reduce_chunks<T, C, M>(n: usize, chunk: C, combine: M) -> Option<T>
where
    T: Send,
    C: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    M: Fn(T, T) -> T,
{
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indices(n_chunks, |c| {
        let start = c * REDUCE_CHUNK;
        chunk(start..(start + REDUCE_CHUNK).min(n))
    });
    partials.into_iter().reduce(combine)
}

/// Sum of `f(j)` over `0..n` with the fixed chunked order.
pub fn sum_indices<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce_chunks(n, |r| r.map(&f).sum::<f64>(), |a, b| a + b).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_flag_is_scoped() {
        let before = is_parallel();
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), before);
    }

    #[test]
    fn reductions_match_between_paths() {
        let f = |j: usize| ((j as f64) * 0.37).sin() * 1e3;
        let par = sum_indices(10_007, f);
        let seq = sequential(|| sum_indices(10_007, f));
        assert_eq!(par.to_bits(), seq.to_bits());
        assert_eq!(map_indices(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn empty_reduction() {
        assert_eq!(sum_indices(0, |_| 1.0), 0.0);
        assert!(reduce_chunks(0, |_| 1, |a, b| a + b).is_none());
    }
}
