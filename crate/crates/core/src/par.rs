//! Data-parallel map facade.
//!
//! Sweep points, Monte Carlo seeds, and Jacobian columns are independent, so
//! the hot loops funnel through [`par_map`]. With the default `parallel`
//! feature it runs on rayon; without it, the sequential fallback keeps the
//! exact same (index-ordered, deterministic) semantics. [`seq_map`] is always
//! available so benches can compare both paths in one build.

/// Sequential reference implementation; output index i holds f(i).
pub fn seq_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Index-ordered map over 0..n, parallel when the `parallel` feature is on.
///
/// Results are collected by index, so the output is identical to
/// [`seq_map`] regardless of worker count.
#[cfg(feature = "parallel")]
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    seq_map(n, f)
}

/// Cap the worker count (global, first call wins). `None` or 0 leaves the
/// default (one worker per core). No-op without the `parallel` feature.
pub fn set_threads(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = n {
            if n > 0 {
                // build_global errs if a pool already exists; callers treat
                // the cap as best-effort
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
