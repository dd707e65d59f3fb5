//! Thin shim over rayon so every data-parallel loop has a sequential twin.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run on the calling thread. Output order is always the input order, so
//! results never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Applies `f(row_index, row)` to consecutive `row_len` chunks of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row));
    }
}

/// Runs `worker(index)` once for each of `count` workers and returns the
/// results in worker order.
///
/// With `parallel`, the workers run concurrently on a dedicated pool of
/// exactly `count` threads. Otherwise they run one after another.
pub fn run_workers<R, F>(count: usize, worker: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let count = count.max(1);
    #[cfg(feature = "parallel")]
    {
        if count > 1 {
            match rayon::ThreadPoolBuilder::new().num_threads(count).build() {
                Ok(pool) => return pool.broadcast(|ctx| worker(ctx.index())),
                Err(err) => log::warn!("falling back to sequential workers: {err}"),
            }
        }
    }
    (0..count).map(worker).collect()
}

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..1000).collect();
        let out = map(&v, |x| x * 2);
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn rows_are_visited_once() {
        let mut data = vec![0u32; 12];
        for_each_row(&mut data, 4, |y, row| row.iter_mut().for_each(|v| *v = y as u32));
        assert_eq!(data, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn workers_share_a_queue() {
        let next = AtomicUsize::new(0);
        let done: Vec<Vec<usize>> = run_workers(3, |_| {
            let mut mine = Vec::new();
            loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= 50 {
                    break;
                }
                mine.push(i);
            }
            mine
        });
        let mut all: Vec<usize> = done.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
