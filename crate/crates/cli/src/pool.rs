//! Tiny worklist pool for independent experiment runs. The `DSBN_THREADS`
//! environment variable caps concurrency.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Maximum concurrent runs: `DSBN_THREADS` when set, otherwise the available
/// parallelism.
pub fn max_threads() -> usize {
    if let Ok(v) = std::env::var("DSBN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
        log::warn!("DSBN_THREADS={v} is not a number; ignoring");
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Runs `jobs` invocations of `f` concurrently (at most [`max_threads`] at a
/// time) and returns the results in job order.
pub fn run_parallel<T, F>(jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = max_threads().min(jobs).max(1);
    if workers <= 1 {
        return (0..jobs).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let out = f(i);
                results.lock().expect("pool poisoned")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("pool poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_preserve_job_order() {
        let out = run_parallel(17, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }
}
