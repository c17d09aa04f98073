//! Data-parallel map with a caller-chosen worker count.
//!
//! Results come back in input order whatever the scheduling, so outputs built
//! from them are identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers == 0 {
        return Err(Error::InvalidParameters("worker count must be >= 1".into()));
    }
    if workers == 1 || items.len() < 2 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameters(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}
