//! Data-parallel map over work indices.
//!
//! With the `parallel` feature the map runs on the rayon pool; without it the
//! sequential path is used. Results always come back in index order, and all
//! reductions downstream sum in that order, so both paths agree bit-exactly.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_sequential(n, f)
}

pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Like [`map_indexed`], reporting the lowest-index error if any item fails.
pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (0 means the default pool).
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| (i as f64 * 0.1).sin();
        assert_eq!(map_indexed(1000, f), map_indexed_sequential(1000, f));
    }

    #[test]
    fn first_error_by_index() {
        let r: Result<Vec<usize>> = try_map_indexed(10, |i| {
            if i >= 3 {
                Err(crate::Error::Precondition(format!("item {i}")))
            } else {
                Ok(i)
            }
        });
        match r {
            Err(crate::Error::Precondition(msg)) => assert_eq!(msg, "item 3"),
            other => panic!("{other:?}"),
        }
    }
}
