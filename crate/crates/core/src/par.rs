//! Order-preserving map helpers. With the `parallel` feature the work is
//! spread over the rayon pool; without it the same closures run in a plain
//! loop. Outputs are always in input order so reductions stay bit-identical
//! between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs three independent closures, concurrently when `parallel` is on.
pub fn join3<A, B, C, FA, FB, FC>(fa: FA, fb: FB, fc: FC) -> (A, B, C)
where
    A: Send,
    B: Send,
    C: Send,
    FA: FnOnce() -> A + Send,
    FB: FnOnce() -> B + Send,
    FC: FnOnce() -> C + Send,
{
    #[cfg(feature = "parallel")]
    {
        let (a, (b, c)) = rayon::join(fa, || rayon::join(fb, fc));
        (a, b, c)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (fa(), fb(), fc())
    }
}

/// Whether this build spreads work over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
