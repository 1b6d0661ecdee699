//! Data-parallel execution over independent work items.
//!
//! Every helper returns results in index order, so reductions performed by
//! the caller over the returned vector are identical for any thread count.
//! Without the `parallel` feature all work runs on the calling thread.

use std::sync::Arc;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GEOLANG_THREADS";

#[derive(Clone)]
pub struct Exec {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
    #[cfg(not(feature = "parallel"))]
    _pool: Option<Arc<()>>,
}

impl std::fmt::Debug for Exec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Exec({} threads)", self.threads())
    }
}

impl Default for Exec {
    fn default() -> Self {
        Exec::sequential()
    }
}

impl Exec {
    pub fn sequential() -> Self {
        Exec {
            #[cfg(feature = "parallel")]
            pool: None,
            #[cfg(not(feature = "parallel"))]
            _pool: None,
        }
    }

    /// Pool with `threads` workers; falls back to sequential for `threads <= 1`
    /// or when built without the `parallel` feature.
    pub fn with_threads(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if threads > 1 {
                if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                    return Exec { pool: Some(Arc::new(pool)) };
                }
            }
        }
        let _ = threads;
        Exec::sequential()
    }

    /// Reads [`THREADS_ENV`]; defaults to a single thread.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        Exec::with_threads(threads)
    }

    pub fn threads(&self) -> usize {
        #[cfg(feature = "parallel")]
        {
            if let Some(pool) = &self.pool {
                return pool.current_num_threads();
            }
        }
        1
    }

    pub fn is_parallel(&self) -> bool {
        self.threads() > 1
    }

    /// `(0..n).map(f)` collected in index order.
    pub fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            if let Some(pool) = &self.pool {
                use rayon::prelude::*;
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
        (0..n).map(f).collect()
    }

    /// Like [`Exec::map`] but stops at the first error in index order.
    pub fn try_map<R, E, F>(&self, n: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Maps over a slice in order.
    pub fn map_slice<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}
