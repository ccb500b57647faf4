//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon. The
//! runtime switch [`set_enabled`] forces the sequential path in a parallel
//! build, which is how the benches compare both. Every helper produces results
//! in input order, so both paths are bit-identical.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Whether parallel dispatch is compiled in and currently switched on.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Toggle parallel dispatch at runtime. No effect without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Number of worker threads parallel dispatch would use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Size the global worker pool. Must run before any parallel work; later
/// calls fail because the pool already exists.
pub fn configure_threads(n: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        return rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string());
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Apply `f(index, chunk)` to consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Map `f` over `items`, collecting results in input order.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order_in_both_modes() {
        let expect: Vec<usize> = (0..100).map(|i| i * i).collect();
        assert_eq!(map_range(100, |i| i * i), expect);
        set_enabled(false);
        assert_eq!(map_range(100, |i| i * i), expect);
        set_enabled(true);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
