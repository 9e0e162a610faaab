//! Deterministic parallel matrix products.
//!
//! Work is split into fixed-size row chunks so results are bitwise identical
//! regardless of how many threads rayon happens to use: each chunk writes a
//! disjoint output slice, and reductions sum ordered per-chunk partials.

use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

/// Rows per independent output chunk.
const PAR_ROWS: usize = 1024;
/// Rows per partial when reducing over the long axis.
const RED_ROWS: usize = 8192;

/// `out = a · b`.
pub fn matmul_into<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    gemm_chunked(a, b, out.view_mut(), T::zero());
}

/// `out += a · b`.
pub fn matmul_acc_into<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    gemm_chunked(a, b, out.view_mut(), T::one());
}

fn gemm_chunked<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    mut out: ArrayViewMut2<T>,
    beta: T,
) {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), out.nrows());
    debug_assert_eq!(b.ncols(), out.ncols());
    if a.nrows() <= PAR_ROWS {
        general_mat_mul(T::one(), &a, &b, beta, &mut out);
        return;
    }
    let pieces: Vec<(ArrayViewMut2<T>, ArrayView2<T>)> = out
        .axis_chunks_iter_mut(Axis(0), PAR_ROWS)
        .zip(a.axis_chunks_iter(Axis(0), PAR_ROWS))
        .collect();
    pieces.into_par_iter().for_each(|(mut o, ac)| {
        general_mat_mul(T::one(), &ac, &b, beta, &mut o);
    });
}

/// `out += aᵀ · g`, reducing over the (long) row axis of `a` and `g`.
///
/// Partials are computed per fixed chunk and summed in chunk order.
pub fn matmul_tn_reduce<T: Scalar>(
    a: ArrayView2<T>,
    g: ArrayView2<T>,
    out: &mut Array2<T>,
) {
    debug_assert_eq!(a.nrows(), g.nrows());
    debug_assert_eq!(out.nrows(), a.ncols());
    debug_assert_eq!(out.ncols(), g.ncols());
    if a.nrows() <= RED_ROWS {
        general_mat_mul(T::one(), &a.t(), &g, T::one(), out);
        return;
    }
    let pairs: Vec<(ArrayView2<T>, ArrayView2<T>)> = a
        .axis_chunks_iter(Axis(0), RED_ROWS)
        .zip(g.axis_chunks_iter(Axis(0), RED_ROWS))
        .collect();
    let partials: Vec<Array2<T>> = pairs
        .into_par_iter()
        .map(|(ac, gc)| {
            let mut p = Array2::<T>::zeros((ac.ncols(), gc.ncols()));
            general_mat_mul(T::one(), &ac.t(), &gc, T::zero(), &mut p);
            p
        })
        .collect();
    for p in partials {
        *out += &p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn naive(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let n = b.ncols();
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[[i, l]] * b[[l, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    #[test]
    fn chunked_matches_naive_across_chunk_boundary() {
        let m = PAR_ROWS + 37;
        let a = Array2::from_shape_fn((m, 5), |(i, j)| ((i * 7 + j * 13) % 11) as f64 - 5.0);
        let b = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j) % 7) as f64 * 0.25);
        let mut out = Array2::zeros((m, 4));
        matmul_into(a.view(), b.view(), out.view_mut());
        let want = naive(&a, &b);
        assert!((&out - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn reduce_matches_naive() {
        let m = RED_ROWS + 101;
        let a = Array2::from_shape_fn((m, 3), |(i, j)| ((i + j * 5) % 13) as f64 * 0.1 - 0.6);
        let g = Array2::from_shape_fn((m, 2), |(i, j)| ((i * 2 + j) % 9) as f64 * 0.2 - 0.8);
        let mut out = Array2::zeros((3, 2));
        matmul_tn_reduce(a.view(), g.view(), &mut out);
        let want = naive(&a.t().to_owned(), &g);
        assert!((&out - &want).iter().all(|d| d.abs() < 1e-9));
    }
}
