//! Worker-thread budget and a deterministic parallel map.
//!
//! `LIFT_LAB_THREADS` caps how many worker threads the pipeline may use.
//! Work items are pure functions of their index, and results land in a
//! pre-sized vector slot per item, so the output is identical whether the
//! map runs on one thread or many.

use std::sync::atomic::{AtomicUsize, Ordering};

pub const THREADS_ENV: &str = "LIFT_LAB_THREADS";

/// Effective worker count: the smaller of `LIFT_LAB_THREADS` (when set and
/// parseable) and the machine's available parallelism, floored at 1.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n.min(avail),
            _ => avail,
        },
        Err(_) => avail,
    }
}

/// Maps `f` over `0..n`, running at most [`worker_count`] items at a time.
/// Results are ordered by index regardless of scheduling.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    let next = AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                let mut guard = slots.lock().expect("par_map slot lock");
                guard[i] = Some(v);
            });
        }
    });
    out.into_iter()
        .map(|v| v.expect("par_map filled every slot"))
        .collect()
}
