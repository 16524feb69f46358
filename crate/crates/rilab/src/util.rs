//! Small shared plumbing: hash aliases and the parallel-map helper that keeps
//! results in submission order regardless of worker count.

pub use rustc_hash::{FxHashMap, FxHashSet};

/// Map `f` over `0..n` and return results in index order. With the `parallel`
/// feature the work runs on a local rayon pool of `threads` workers; without
/// it (or with `threads <= 1`) it runs sequentially. Either way the output is
/// identical, which is what makes whole-experiment byte-determinism hold for
/// any `--threads`.
pub fn indexed_map<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        if threads > 1 && n > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.min(n))
                .build()
                .expect("failed to build thread pool");
            return pool.install(|| {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(&f).collect()
            });
        }
    }
    let _ = threads;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_map_order_independent_of_threads() {
        let a = indexed_map(1, 100, |i| i * i);
        let b = indexed_map(8, 100, |i| i * i);
        assert_eq!(a, b);
    }
}
