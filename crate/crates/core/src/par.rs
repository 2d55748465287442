//! Execution policy for the per-molecule loops.
//!
//! With the `parallel` feature the [`Execution::Parallel`] policy maps over
//! rayon's pool; without it both policies run sequentially. Results are
//! always collected in index order, so the output does not depend on the
//! worker count.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// `f(0), f(1), …, f(n-1)` under the given policy, in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but stops at the lowest-index error.
pub fn try_map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}
