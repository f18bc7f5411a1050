//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) batch work is spread over the
//! rayon pool; without it every helper runs sequentially. Results are always
//! collected in input order so outputs do not depend on scheduling.

use serde::{Deserialize, Serialize};

/// How a batch operation should run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses rayon when compiled with `parallel`, otherwise sequential.
    #[default]
    Parallel,
}

impl Execution {
    /// True when this mode will actually use worker threads.
    pub fn is_threaded(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub(crate) fn map_slice<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub(crate) fn map_range<R, F>(n: usize, exec: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub(crate) fn try_map_slice<T, R, E, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    // Collect everything first so the reported error is the first one in
    // input order, not whichever worker failed first.
    map_slice(items, exec, f).into_iter().collect()
}

/// Caps the global rayon pool. A no-op without the `parallel` feature.
/// Returns false if the pool was already initialised.
pub fn set_thread_cap(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}
