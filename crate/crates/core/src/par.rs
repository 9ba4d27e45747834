//! Bounded data-parallel map over a batch.
//!
//! With the `parallel` feature the batch runs on a dedicated rayon pool of
//! the requested width; without it, or with a width of 1, items are
//! processed in order on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Workers {
    width: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(width: usize) -> Self {
        let width = width.max(1);
        Workers {
            width,
            #[cfg(feature = "parallel")]
            pool: (width > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(width)
                    .thread_name(|i| format!("fingraph-worker-{i}"))
                    .build()
                    .expect("worker pool builds")
            }),
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// Maps `f` over `items`, returning results in input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            if items.len() > 1 {
                return pool.install(|| items.par_iter().map(&f).collect());
            }
        }
        items.iter().map(f).collect()
    }
}
