//! IO, file formats, experiment orchestration, and reporting around the
//! core registration library.
//!
//! Everything the `srgd` binary does lives here so integration tests can
//! drive the same entry points in-process. Commands are reproducible from
//! (config, seed): rerunning one produces byte-identical files, SVGs
//! included.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod gridfile;
pub mod report;
pub mod runner;
pub mod selftest;
pub mod svg;

use std::fmt;

/// Command failures, bucketed by exit code: usage 1, data 2, numeric 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {}", m),
            CliError::Data(m) => write!(f, "data error: {}", m),
            CliError::Numeric(m) => write!(f, "numeric failure: {}", m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<srgd_core::Error> for CliError {
    fn from(e: srgd_core::Error) -> Self {
        match e {
            srgd_core::Error::NonFinite { .. } | srgd_core::Error::Diverged { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Order-preserving map over `items` on up to `workers` threads. The first
/// failure wins and the remaining work is abandoned. Jobs must not depend
/// on execution order; every caller here derives per-item seeds, so the
/// output is identical for any worker count.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> CliResult<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> CliResult<R> + Sync,
{
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Mutex;

    let n = items.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> =
        items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let error: Mutex<Option<CliError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    return;
                }
                let item = slots[i].lock().expect("slot lock").take().expect("item taken once");
                match f(item) {
                    Ok(r) => *results[i].lock().expect("result lock") = Some(r),
                    Err(e) => {
                        failed.store(true, Ordering::Relaxed);
                        let mut guard = error.lock().expect("error lock");
                        if guard.is_none() {
                            *guard = Some(e);
                        }
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = error.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("job completed"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order_and_propagates_errors() {
        let out = parallel_map((0..100).collect(), 4, |i: usize| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());

        let err = parallel_map((0..100).collect(), 4, |i: usize| {
            if i == 37 {
                Err(CliError::Numeric("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(err, Err(CliError::Numeric(_))));
    }
}
