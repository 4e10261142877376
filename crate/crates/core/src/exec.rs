//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the helpers fan work out over the
//! rayon pool; without it, or after [`set_parallel(false)`](set_parallel),
//! they run the same closures sequentially. Every helper produces its output
//! in input order and never reduces across workers, so results are identical
//! on both paths.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Minimum amount of work (roughly multiply-adds) before a kernel fans out.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Runtime switch for the parallel path. Has no effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs `f(row_index, row)` over consecutive `width`-sized rows of `data`.
/// `work` is an estimate of the total cost used to decide whether fanning
/// out is worth it.
pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PAR_THRESHOLD && data.len() > width {
        use rayon::prelude::*;
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}
