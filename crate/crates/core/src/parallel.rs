//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan out over the rayon
//! pool; without it they run sequentially. Both paths produce results in
//! index order, element by element, so output bytes never depend on the
//! worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row count below which parallel dispatch is not worth the overhead.
pub(crate) const PAR_ROW_THRESHOLD: usize = 256;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= PAR_ROW_THRESHOLD {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Always-sequential twin of [`map_indexed`], kept for benchmarks.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f` to each `cols`-wide row of `data` in place.
pub fn for_each_row_mut<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(cols > 0 && data.len() % cols == 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() / cols >= PAR_ROW_THRESHOLD {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, row)| f(r, row));
            return;
        }
    }
    for (r, row) in data.chunks_mut(cols).enumerate() {
        f(r, row);
    }
}
