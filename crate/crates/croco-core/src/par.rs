//! Data-parallel execution helpers with a bit-identical sequential twin.
//!
//! Per-item work (patch encoding, query scoring) is independent, so parallel
//! and sequential execution produce the same bytes. Reductions (gradient
//! accumulation) use fixed-size chunks combined in chunk order, which makes
//! the floating-point summation order independent of the worker count.
//!
//! With the `parallel` feature disabled the `parallel` flag is ignored and
//! everything runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk width for deterministic reductions. Independent of the
/// thread count by design: changing it changes summation order.
pub const REDUCE_CHUNK: usize = 8;

/// Worker count the parallel paths will use (1 when the `parallel` feature
/// is off); used by tests to convert wall time into a core budget.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Map `0..n` to a vector, preserving index order.
pub fn map_index<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Fallible ordered map over `0..n`; first error wins.
pub fn try_map_index<R, E, F>(n: usize, parallel: bool, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Chunked map-reduce with a deterministic combination order.
///
/// Items are split into `REDUCE_CHUNK`-sized chunks; each chunk folds its
/// items in index order into a fresh accumulator, then chunk accumulators
/// are combined left to right. The result is identical for any worker count.
pub fn chunked_reduce<T, A, FInit, FFold, FCombine>(
    items: &[T],
    parallel: bool,
    init: FInit,
    fold: FFold,
    combine: FCombine,
) -> A
where
    T: Sync,
    A: Send,
    FInit: Fn() -> A + Sync + Send,
    FFold: Fn(&mut A, &T) + Sync + Send,
    FCombine: Fn(&mut A, A),
{
    let fold_chunk = |chunk: &[T]| {
        let mut acc = init();
        for item in chunk {
            fold(&mut acc, item);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let chunk_accs: Vec<A> = if parallel {
        items.par_chunks(REDUCE_CHUNK).map(fold_chunk).collect()
    } else {
        items.chunks(REDUCE_CHUNK).map(fold_chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunk_accs: Vec<A> = {
        let _ = parallel;
        items.chunks(REDUCE_CHUNK).map(fold_chunk).collect()
    };

    let mut iter = chunk_accs.into_iter();
    let mut total = iter.next().unwrap_or_else(init);
    for acc in iter {
        combine(&mut total, acc);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_index_parallel_matches_sequential() {
        let p = map_index(100, true, |i| (i as f64).sqrt());
        let s = map_index(100, false, |i| (i as f64).sqrt());
        assert_eq!(p, s);
    }

    #[test]
    fn chunked_reduce_order_is_fixed() {
        // Values chosen so naive reordering would change the f64 sum.
        let items: Vec<f64> = (0..100).map(|i| 1.0 + (i as f64) * 1e-13).collect();
        let sum = |par: bool| {
            chunked_reduce(
                &items,
                par,
                || 0.0f64,
                |a, x| *a += *x,
                |a, b| *a += b,
            )
        };
        assert_eq!(sum(true).to_bits(), sum(false).to_bits());
    }

    #[test]
    fn try_map_propagates_errors() {
        let r: Result<Vec<usize>, String> =
            try_map_index(10, true, |i| if i == 7 { Err("boom".into()) } else { Ok(i) });
        assert!(r.is_err());
    }
}
