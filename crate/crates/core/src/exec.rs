//! Data-parallel map with a sequential fallback.
//!
//! Results are always returned in input order, so the execution strategy
//! never changes numerical output.

use crate::contrast::Execution;

/// Applies `f` to every item, in parallel when the `parallel` feature is
/// enabled and `exec` asks for it.
pub fn map_ordered<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
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

/// True when the crate was built with the rayon backend.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
