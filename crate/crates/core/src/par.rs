//! Index-ordered parallel map.
//!
//! Monte Carlo ensembles are generated per stream id and collected in index
//! order; any reduction over the result is then a sequential fold, so the
//! output is bit-identical for any thread count.

/// Evaluate `f(0..n)` and collect the results in index order.
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
    (0..n).map(f).collect()
}

/// Like [`map_indexed`], but stops at the first error (in index order).
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let v = map_indexed(1000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 3 * i));
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(100, |i| if i % 17 == 16 { Err(i) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), 16);
    }
}
