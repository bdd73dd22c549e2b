//! Batch execution policy.
//!
//! Per-sample work is mapped over fixed-size chunks; each chunk is reduced
//! sequentially in sample order and chunk results are combined in chunk
//! order. Chunk boundaries never depend on the worker count, so results are
//! bitwise identical for sequential and parallel runs.

#[cfg(feature = "parallel")]
use crate::error::Error;
use crate::error::Result;

/// Samples per reduction chunk.
pub const REDUCTION_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    /// Parallel over samples. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    #[default]
    Parallel,
}

pub struct Executor {
    mode: ExecMode,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("mode", &self.mode)
            .field("threads", &self.threads())
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            mode: ExecMode::Sequential,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Parallel executor with `threads` workers (0 = rayon's default).
    pub fn parallel(threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(Self {
                mode: ExecMode::Parallel,
                pool: Some(pool),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Ok(Self::sequential())
        }
    }

    pub fn from_threads(threads: usize) -> Result<Self> {
        if threads == 1 {
            Ok(Self::sequential())
        } else {
            Self::parallel(threads)
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn threads(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    /// Order-preserving map over `0..n`.
    pub fn map_indices<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Deterministic chunked reduction over `items`.
    ///
    /// `init` creates a chunk accumulator, `fold` adds one item to it (in item
    /// order) and `merge` combines chunk accumulators left to right.
    pub fn reduce<T, A, I, F, M>(&self, items: &[T], init: I, fold: F, merge: M) -> Result<A>
    where
        T: Sync,
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, usize, &T) -> Result<()> + Sync + Send,
        M: Fn(&mut A, A),
    {
        let n_chunks = items.len().div_ceil(REDUCTION_CHUNK);
        let partials = self.map_indices(n_chunks, |c| -> Result<A> {
            let start = c * REDUCTION_CHUNK;
            let end = (start + REDUCTION_CHUNK).min(items.len());
            let mut acc = init();
            for (offset, item) in items[start..end].iter().enumerate() {
                fold(&mut acc, start + offset, item)?;
            }
            Ok(acc)
        });
        let mut total = init();
        for p in partials {
            merge(&mut total, p?);
        }
        Ok(total)
    }
}
