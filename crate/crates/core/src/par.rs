//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run sequentially. Results are always returned in input order, so any
//! reduction over them is deterministic regardless of scheduling.

/// Maps `f` over `items` sequentially.
pub fn map_seq<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n` sequentially.
pub fn map_range_seq<O, F>(n: usize, f: F) -> Vec<O>
where
    F: Fn(usize) -> O,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_par<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range_par<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Order-preserving map; parallel when the `parallel` feature is enabled.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Order-preserving map over an index range.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_range_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, f)
    }
}
