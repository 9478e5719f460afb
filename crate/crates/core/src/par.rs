//! Data-parallel kernels with a sequential fallback.
//!
//! With the `parallel` feature (default) the row loops run on the rayon pool;
//! without it they run in order on the calling thread. Every reduction uses a
//! fixed chunking that does not depend on the thread count, so results are
//! bit-identical between pool sizes.

use ndarray::{s, Array2, ArrayView2};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per block for blocked dense products and chunked reductions.
pub const BLOCK_ROWS: usize = 256;

/// Environment variable that caps the worker count.
pub const THREADS_ENV: &str = "HETPRE_THREADS";

/// Configure the global pool from `HETPRE_THREADS`, if set. Returns the
/// thread count in effect.
pub fn init_threads_from_env() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // Ignore the error if a pool was already installed.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Call `f(row_index, row)` for every `width`-sized row of `data`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is by index.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
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

/// Like [`map_indices`], with a per-worker scratch value built by `init`.
pub fn map_indices_with<T, S, I, F>(n: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(&mut S, usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map_init(init, f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut scratch = init();
        (0..n).map(|i| f(&mut scratch, i)).collect()
    }
}

/// Dense `a · b`, split into row blocks of [`BLOCK_ROWS`].
pub fn dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, _) = a.dim();
    let m = b.ncols();
    if n <= BLOCK_ROWS {
        return a.dot(&b);
    }
    let mut out = Array2::<f64>::zeros((n, m));
    let blocks = n.div_ceil(BLOCK_ROWS);
    let parts = map_indices(blocks, |blk| {
        let lo = blk * BLOCK_ROWS;
        let hi = (lo + BLOCK_ROWS).min(n);
        a.slice(s![lo..hi, ..]).dot(&b)
    });
    for (blk, part) in parts.into_iter().enumerate() {
        let lo = blk * BLOCK_ROWS;
        out.slice_mut(s![lo..lo + part.nrows(), ..]).assign(&part);
    }
    out
}

/// Dense `aᵀ · b` where both operands share the (long) row axis. Partial
/// products over fixed row chunks are summed in chunk order.
pub fn tdot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let n = a.nrows();
    if n <= BLOCK_ROWS {
        return a.t().dot(&b);
    }
    let blocks = n.div_ceil(BLOCK_ROWS);
    let parts = map_indices(blocks, |blk| {
        let lo = blk * BLOCK_ROWS;
        let hi = (lo + BLOCK_ROWS).min(n);
        a.slice(s![lo..hi, ..]).t().dot(&b.slice(s![lo..hi, ..]))
    });
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one block");
    for p in iter {
        acc += &p;
    }
    acc
}
