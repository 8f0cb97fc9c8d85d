//! Client- and sample-level fan-out.
//!
//! With the `parallel` feature and more than one thread, work is spread over
//! a dedicated rayon pool; otherwise it runs in order on the calling thread.
//! Outputs are always returned in input order, so callers that derive their
//! randomness from per-item streams get identical results either way.

#[cfg(feature = "parallel")]
use std::sync::Arc;

/// Environment variable capping client parallelism.
pub const THREADS_ENV: &str = "DDSA_THREADS";

#[derive(Clone)]
pub struct Parallelism {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Parallelism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parallelism")
            .field("threads", &self.threads)
            .finish()
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Parallelism {
    pub fn sequential() -> Self {
        Self {
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    pub fn with_threads(threads: usize) -> Self {
        let threads = threads.max(1);
        if threads == 1 {
            return Self::sequential();
        }
        #[cfg(feature = "parallel")]
        {
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => Self {
                    threads,
                    pool: Some(Arc::new(pool)),
                },
                Err(err) => {
                    log::warn!("falling back to sequential execution: {err}");
                    Self::sequential()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::debug!("built without the `parallel` feature; ignoring {threads} threads");
            Self::sequential()
        }
    }

    /// Reads `DDSA_THREADS`; unset or unparsable means one thread.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        Self::with_threads(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn is_parallel(&self) -> bool {
        self.threads > 1
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter_mut().map(&f).collect());
        }
        items.iter_mut().map(f).collect()
    }

    pub fn map_range<R, F>(&self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..len).into_par_iter().map(&f).collect());
        }
        (0..len).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let seq = Parallelism::sequential().map(&items, |x| x * x);
        let par = Parallelism::with_threads(4).map(&items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(
            Parallelism::with_threads(3).map_range(10, |i| i + 1),
            (1..=10).collect::<Vec<_>>()
        );
    }
}
