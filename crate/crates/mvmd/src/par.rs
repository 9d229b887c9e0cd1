//! Thread-pool executor for the kernel.

use mvmd_core::Executor;
use rayon::prelude::*;

/// Runs kernel loops on a dedicated rayon pool. Results come back in index
/// order, so output never depends on the number of threads.
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    /// `threads = 0` uses the available parallelism.
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(Self { pool })
    }
}

impl Executor for RayonExecutor {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..count).into_par_iter().map(f).collect())
    }

    fn for_each_mut<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        // tiny per-item work: keep chunks coarse
        let chunk = items.len().div_ceil(4 * self.workers()).max(16);
        self.pool.install(|| {
            items
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(c, part)| {
                    for (i, item) in part.iter_mut().enumerate() {
                        f(c * chunk + i, item);
                    }
                })
        })
    }

    fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}
