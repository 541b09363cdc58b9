//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) these dispatch to rayon; without
//! it they are plain loops. Every helper produces results in index order and
//! never splits a floating-point reduction across threads, so outputs are
//! bit-identical in both builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(row_index, row)` for each `row_len`-wide chunk of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Maps `f` over a slice, collecting results in order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_in_place() {
        let mut data = vec![0.0; 12];
        for_each_row_mut(&mut data, 4, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        });
        assert_eq!(data[5], 11.0);
        assert_eq!(data[11], 23.0);
    }

    #[test]
    fn map_preserves_order() {
        let out = map_slice(&[3, 1, 2], |x| x + 1);
        assert_eq!(out, vec![4, 2, 3]);
    }
}
