//! Thread-pool executor for devices within a round.

use hetfed_core::fedsim::Executor;
use rayon::prelude::*;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "HETFED_THREADS";

pub struct PoolExecutor {
    pool: rayon::ThreadPool,
}

impl PoolExecutor {
    /// `threads == 0` lets rayon pick the core count.
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        PoolExecutor { pool }
    }

    /// Sized from `HETFED_THREADS`; unset or unparsable means all cores.
    pub fn from_env() -> Self {
        Self::new(threads_from_env())
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `f` inside the pool so nested rayon work respects its cap.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

impl Executor for PoolExecutor {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
