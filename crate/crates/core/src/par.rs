//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over a rayon pool
//! sized by [`Parallelism::workers`]. Without it, or with one worker, items
//! are processed in order on the calling thread. Output order always
//! matches input order.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parallelism {
    workers: usize,
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::auto()
    }
}

impl Parallelism {
    pub fn sequential() -> Self {
        Parallelism { workers: 1 }
    }

    /// One worker per available core.
    pub fn auto() -> Self {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        Parallelism { workers: n }
    }

    /// `0` means [`Parallelism::auto`].
    pub fn workers(n: usize) -> Self {
        if n == 0 {
            Self::auto()
        } else {
            Parallelism { workers: n }
        }
    }

    pub fn worker_count(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && self.workers > 1
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return match rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
            {
                Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                Err(e) => {
                    log::warn!("falling back to sequential execution: {e}");
                    items.iter().map(f).collect()
                }
            };
        }
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..500).collect();
        let seq = Parallelism::sequential().map(&items, |x| x * x);
        let par = Parallelism::workers(4).map(&items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(Parallelism::workers(0), Parallelism::auto());
    }
}
