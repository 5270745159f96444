//! Data parallelism across independent sequences.
//!
//! With the `parallel` feature, [`Parallelism::Rayon`] fans work out on a
//! rayon pool; without it every variant runs sequentially. Results always
//! come back in input order, so reductions over them are deterministic.

/// Environment variable capping the evaluation thread count.
pub const THREADS_ENV: &str = "GATEDKV_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Rayon,
    Sequential,
}

impl Parallelism {
    /// `Sequential` when `GATEDKV_THREADS=1` or the feature is off.
    pub fn from_env() -> Self {
        match env_threads() {
            Some(1) => Parallelism::Sequential,
            _ if cfg!(feature = "parallel") => Parallelism::Rayon,
            _ => Parallelism::Sequential,
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Parallelism::Sequential => items.iter().map(f).collect(),
            Parallelism::Rayon => par_map(items, f),
        }
    }
}

fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect();
    match env_threads() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
