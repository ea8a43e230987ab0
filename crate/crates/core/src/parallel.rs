//! Data-parallel map helpers.
//!
//! Every helper returns results in input order, so reductions performed by
//! the caller are identical whether the work ran on the rayon pool or on the
//! current thread. Without the `parallel` feature both modes run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Applies `f(i)` for `i in 0..n`, collecting in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_range`] but with per-worker scratch state built by `init`.
pub fn map_range_init<S, R, I, F>(exec: Execution, n: usize, init: I, f: F) -> Vec<R>
where
    R: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map_init(init, f).collect(),
        _ => {
            let mut state = init();
            (0..n).map(|i| f(&mut state, i)).collect()
        }
    }
}
