//! Data-parallel helpers that fall back to sequential iteration when the
//! `parallel` feature is off (e.g. in the browser build).

#[cfg(feature = "parallel")]
pub(crate) fn par_map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).map(f).collect()
}
