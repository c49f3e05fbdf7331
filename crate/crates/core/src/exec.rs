//! Fan-out helper for per-client and per-run work.
//!
//! Results always come back in input order, so anything reduced from them
//! is independent of how many workers ran. Without the `parallel` feature
//! every executor runs sequentially.

#[cfg(feature = "parallel")]
use crate::error::Error;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// A dedicated pool; `0` lets the runtime pick the thread count.
    Threads(usize),
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::Threads(0)
    }
}

impl Parallelism {
    /// `1` maps to sequential execution, anything else to a pool of that size.
    pub fn from_workers(workers: usize) -> Self {
        if workers == 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(workers)
        }
    }
}

enum Inner {
    Sequential,
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
}

pub struct Executor {
    inner: Inner,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers())
            .finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            inner: Inner::Sequential,
        }
    }

    pub fn new(p: Parallelism) -> Result<Self> {
        match p {
            Parallelism::Sequential => Ok(Self::sequential()),
            #[cfg(feature = "parallel")]
            Parallelism::Threads(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
                Ok(Executor {
                    inner: Inner::Pool(pool),
                })
            }
            #[cfg(not(feature = "parallel"))]
            Parallelism::Threads(_) => Ok(Self::sequential()),
        }
    }

    pub fn workers(&self) -> usize {
        match &self.inner {
            Inner::Sequential => 1,
            #[cfg(feature = "parallel")]
            Inner::Pool(pool) => pool.current_num_threads(),
        }
    }

    /// Applies `f` to every item, possibly concurrently, with exclusive access.
    pub fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Send + Sync,
    {
        match &self.inner {
            Inner::Sequential => items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect(),
            #[cfg(feature = "parallel")]
            Inner::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| {
                    items
                        .par_iter_mut()
                        .enumerate()
                        .map(|(i, t)| f(i, t))
                        .collect()
                })
            }
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Send + Sync,
    {
        match &self.inner {
            Inner::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            #[cfg(feature = "parallel")]
            Inner::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
            }
        }
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::new(Parallelism::default()).unwrap_or_else(|_| Self::sequential())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..100).collect();
        for p in [Parallelism::Sequential, Parallelism::Threads(4)] {
            let ex = Executor::new(p).unwrap();
            let out = ex.map(&items, |i, v| (i as u64) * 1000 + v * v);
            assert_eq!(
                out,
                items.iter().map(|v| v * 1000 + v * v).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn map_mut_touches_each_item_once() {
        let mut items = vec![0u32; 37];
        let ex = Executor::new(Parallelism::Threads(3)).unwrap();
        let idx = ex.map_mut(&mut items, |i, v| {
            *v += 1;
            i
        });
        assert!(items.iter().all(|&v| v == 1));
        assert_eq!(idx, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn one_worker_is_sequential() {
        assert_eq!(Parallelism::from_workers(1), Parallelism::Sequential);
        assert_eq!(
            Executor::new(Parallelism::from_workers(1))
                .unwrap()
                .workers(),
            1
        );
    }
}
