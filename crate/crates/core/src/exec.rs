//! Order-preserving data-parallel maps. With the `parallel` feature the work
//! runs on the rayon pool; without it (or with `parallel = false`) the same
//! closures run sequentially, so results are identical either way.

/// Whether the crate was built with rayon support.
pub const PARALLEL_AVAILABLE: bool = cfg!(feature = "parallel");

pub fn map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(2654435761) % 97;
        assert_eq!(map(&xs, true, f), map(&xs, false, f));
        assert_eq!(map_range(50, true, |i| i * i), map_range(50, false, |i| i * i));
    }
}
