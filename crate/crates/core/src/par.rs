//! Data-parallel execution over indexed work items.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it every entry point runs sequentially. Results are always returned
//! in input order, so output never depends on the worker count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parallelism {
    Sequential,
    /// Run on a dedicated pool of `n` threads; `0` uses rayon's global pool.
    Threads(usize),
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::Threads(0)
    }
}

impl Parallelism {
    pub fn from_workers(workers: usize) -> Self {
        if workers == 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(workers)
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Parallelism::Sequential)
    }
}

/// Applies `f` to every item, preserving order.
pub fn map<I, T, F>(items: &[I], par: Parallelism, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match par {
            Parallelism::Sequential => items.iter().map(f).collect(),
            Parallelism::Threads(0) => items.par_iter().map(f).collect(),
            Parallelism::Threads(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                Err(err) => {
                    log::warn!("thread pool unavailable ({err}); running sequentially");
                    items.iter().map(f).collect()
                }
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = par;
        items.iter().map(f).collect()
    }
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_range<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, par, |&i| f(i))
}

/// Calls `f(row_index, row)` on each `row_len`-sized chunk of `data`.
pub fn for_each_row_mut<T, F>(data: &mut [T], row_len: usize, par: Parallelism, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = |data: &mut [T]| data.par_chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
        match par {
            Parallelism::Sequential => data.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r)),
            Parallelism::Threads(0) => run(data),
            Parallelism::Threads(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| run(data)),
                Err(_) => data.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r)),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = par;
        data.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let seq = map_range(1000, Parallelism::Sequential, |i| i * i);
        for par in [Parallelism::Threads(0), Parallelism::Threads(3), Parallelism::Threads(16)] {
            assert_eq!(map_range(1000, par, |i| i * i), seq);
        }
    }

    #[test]
    fn rows_are_visited_once() {
        let mut data = vec![0usize; 12];
        for_each_row_mut(&mut data, 4, Parallelism::Threads(2), |row, chunk| {
            chunk.iter_mut().for_each(|v| *v += row + 1)
        });
        assert_eq!(data, vec![1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
    }
}
