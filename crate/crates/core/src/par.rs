//! Execution policy for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) the `Parallel` policy runs on the
//! rayon global pool; without it every policy runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Below this many elements a parallel split costs more than it saves.
pub(crate) const MIN_PARALLEL_LEN: usize = 1 << 10;

/// Fills `out[k] = f(k)` for every index.
pub(crate) fn fill_indexed<T, F>(policy: ExecPolicy, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && out.len() >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        out.par_iter_mut()
            .with_min_len(MIN_PARALLEL_LEN / 4)
            .enumerate()
            .for_each(|(k, slot)| *slot = f(k));
        return;
    }
    let _ = policy;
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = f(k);
    }
}

/// Maps `0..n` to a vector, preserving index order.
pub(crate) fn map_range<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}
