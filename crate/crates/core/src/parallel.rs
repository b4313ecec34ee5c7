//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it, or with [`Execution::Sequential`], the same
//! closures run in index order on the calling thread. Results are always
//! returned in index order so both paths produce identical numbers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk_i)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<F>(exec: Execution, data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Runs `f` on a pool capped at `threads` workers (ignored without the
/// `parallel` feature or when `None`).
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

/// Worker cap from `TDM_THREADS`, if set and parseable.
pub fn env_thread_cap() -> Option<usize> {
    std::env::var("TDM_THREADS").ok()?.trim().parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let f = |i: usize| (i as f64).sin() * 3.0;
        assert_eq!(
            map_indexed(Execution::Sequential, 100, f),
            map_indexed(Execution::Parallel, 100, f)
        );
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        for_each_chunk_mut(Execution::Sequential, &mut a, 4, |i, c| c.fill(i as f64));
        for_each_chunk_mut(Execution::Parallel, &mut b, 4, |i, c| c.fill(i as f64));
        assert_eq!(a, b);
        assert_eq!(a[11], 2.0);
    }
}
