//! Serial / data-parallel execution switch.
//!
//! Every parallel code path in the crate goes through [`Execution`]. Work
//! items are indexed and seeded by index, so both modes produce identical
//! results. Without the `parallel` feature, `Parallel` runs serially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    /// `(0..n).map(f)`, possibly across threads; output is in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Serial => (0..n).map(f).collect(),
            Execution::Parallel => par_map(n, f),
        }
    }

    /// Calls `f(i, chunk)` for the `i`-th `chunk_len`-sized chunk of `data`.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            Execution::Serial => data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)),
            Execution::Parallel => par_chunks(data, chunk_len, f),
        }
    }

    /// True when this build can actually run work on several threads.
    pub fn is_parallel(self) -> bool {
        self == Execution::Parallel && cfg!(feature = "parallel")
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_chunks<T: Send, F: Fn(usize, &mut [T]) + Sync + Send>(data: &mut [T], chunk_len: usize, f: F) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
fn par_chunks<T: Send, F: Fn(usize, &mut [T]) + Sync + Send>(data: &mut [T], chunk_len: usize, f: F) {
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Caps the global worker pool. A no-op in serial builds.
pub fn init_threads(threads: Option<usize>) -> crate::error::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(k) = threads {
        if k == 0 {
            return Err(crate::error::Error::InvalidArgument("thread count must be positive".into()));
        }
        // the global pool can only be configured once per process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads == Some(0) {
        return Err(crate::error::Error::InvalidArgument("thread count must be positive".into()));
    }
    Ok(())
}
