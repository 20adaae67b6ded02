//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it, or after [`set_enabled(false)`](set_enabled), the same closures
//! run in order on the calling thread. Every helper splits work into a fixed
//! partition that does not depend on the thread count, and reductions combine
//! partial results left to right, so both modes return bitwise-identical
//! values.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Turns parallel execution on or off at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::SeqCst);
}

/// Whether helpers in this module currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Evaluates `f(i)` for `i in 0..n`, preserving index order in the output.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Fallible variant of [`map_range`]; returns the first error by index.
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// Splits `0..n` into fixed chunks of `chunk` items, maps each chunk with
/// `f(start, end)` and folds the partial results in chunk order.
pub fn chunked_reduce<T, F, R>(n: usize, chunk: usize, f: F, init: T, mut reduce: R) -> T
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
    R: FnMut(T, T) -> T,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_range(n_chunks, |c| {
        let start = c * chunk;
        f(start, (start + chunk).min(n))
    });
    let mut acc = init;
    for p in partials {
        acc = reduce(acc, p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_reduce_matches_sequential_sum() {
        let xs: Vec<f64> = (0..10_001).map(|i| (i as f64).sin()).collect();
        let by_chunks = chunked_reduce(
            xs.len(),
            97,
            |s, e| xs[s..e].iter().sum::<f64>(),
            0.0,
            |a, b| a + b,
        );
        let mut expected = 0.0;
        for c in xs.chunks(97) {
            expected += c.iter().sum::<f64>();
        }
        assert_eq!(by_chunks.to_bits(), expected.to_bits());
    }

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
