//! Batch execution: data-parallel by default, sequential on demand.

/// How a batch of independent episodes is executed. `Parallel` uses the
/// rayon pool when the `parallel` feature is enabled and silently falls
/// back to the calling thread otherwise; outputs are identical.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Parallel,
    Sequential,
}

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(execution: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match execution {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(_execution: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
