//! Order-preserving fallible map over a bounded worker pool.

use crate::error::{Error, Result};

/// Applies `f` to every item on up to `jobs` threads (all cores when `None`)
/// and returns the results in input order.
#[cfg(feature = "parallel")]
pub(crate) fn try_map<T, R, F>(items: &[T], jobs: Option<usize>, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    check_jobs(jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map<T, R, F>(items: &[T], jobs: Option<usize>, f: F) -> Result<Vec<R>>
where
    F: Fn(&T) -> Result<R>,
{
    check_jobs(jobs)?;
    items.iter().map(f).collect()
}

fn check_jobs(jobs: Option<usize>) -> Result<()> {
    if jobs == Some(0) {
        Err(Error::Usage("--jobs must be at least 1".into()))
    } else {
        Ok(())
    }
}
