//! Bounded worker pool for read-only fan-out (data loading, evaluation).

use std::sync::OnceLock;

use rayon::prelude::*;

/// Environment variable capping data-loading parallelism.
pub const NUM_WORKERS_ENV: &str = "DOWNSCALE_NUM_WORKERS";

/// Worker count from `DOWNSCALE_NUM_WORKERS`, defaulting to the available cores.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(num_workers())
            .thread_name(|i| format!("downscale-worker-{i}"))
            .build()
            .expect("worker pool")
    })
}

/// Maps `f` over `items` on the worker pool. Results keep input order, so
/// callers reduce them deterministically.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if items.len() <= 1 || num_workers() == 1 {
        return items.iter().map(f).collect();
    }
    pool().install(|| items.par_iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_order() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(map_ordered(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
