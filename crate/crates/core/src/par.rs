//! Data-parallel helpers. With the `parallel` feature (default) these run on
//! rayon; without it every call degrades to a sequential loop. Output order
//! always matches input order, so results are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether parallel execution is compiled in.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map`], but with at most `limit` items in flight. Used for backend
/// calls where the limit is a politeness bound, not a CPU bound.
pub fn map_bounded<T, R, F>(limit: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if limit > 1 && items.len() > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
            return pool.install(|| items.par_iter().map(f).collect());
        }
    }
    let _ = limit;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map(Execution::Sequential, &xs, |x| x * x);
        let par = map(Execution::Parallel, &xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(map_range(Execution::Parallel, 10, |i| i), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn bounded_never_exceeds_limit() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let xs: Vec<u32> = (0..64).collect();
        let out = map_bounded(3, &xs, |x| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(1));
            live.fetch_sub(1, Ordering::SeqCst);
            x + 1
        });
        assert_eq!(out, (1..65).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }
}
