//! Matrix products: plain, batched, and the `linear` layer primitive.

use super::{as_rows, as_rows_mut, matmul_into, matmul_tn_reduce, OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use rayon::prelude::*;

fn view3<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected 3-d batch of matrices");
    (s[0], s[1], s[2])
}

fn batch_mats<T: Scalar>(a: &ArrayD<T>) -> Vec<ArrayView2<'_, T>> {
    let (b, m, k) = view3(a);
    let slice = a.as_slice().expect("contiguous");
    (0..b)
        .map(|i| ArrayView2::from_shape((m, k), &slice[i * m * k..(i + 1) * m * k]).unwrap())
        .collect()
}

/// `out[b] = a[b] · b_mat[b]`; optionally transposing the second operand.
fn bmm_value<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, transpose_b: bool) -> ArrayD<T> {
    let (nb, m, _k) = view3(a);
    let (nb2, r2, c2) = view3(b);
    assert_eq!(nb, nb2, "bmm: batch mismatch");
    let n = if transpose_b { r2 } else { c2 };
    let mut out = ArrayD::<T>::zeros(IxDyn(&[nb, m, n]));
    let av = batch_mats(a);
    let bv = batch_mats(b);
    let out_slice = out.as_slice_mut().expect("contiguous");
    let chunks: Vec<(usize, &mut [T])> = out_slice.chunks_mut(m * n).enumerate().collect();
    chunks.into_par_iter().for_each(|(i, chunk)| {
        let mut o = ndarray::ArrayViewMut2::from_shape((m, n), chunk).unwrap();
        if transpose_b {
            ndarray::linalg::general_mat_mul(T::one(), &av[i], &bv[i].t(), T::zero(), &mut o);
        } else {
            ndarray::linalg::general_mat_mul(T::one(), &av[i], &bv[i], T::zero(), &mut o);
        }
    });
    out
}

struct MatmulOp;

impl<T: Scalar> OpBackward<T> for MatmulOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let a = as_rows(parents[0]);
        let b = as_rows(parents[1]);
        let gv = as_rows(g);
        let mut da = ArrayD::<T>::zeros(parents[0].raw_dim());
        let mut db = ArrayD::<T>::zeros(parents[1].raw_dim());
        {
            let mut dav = as_rows_mut(&mut da);
            // da = g · bᵀ
            let bt = b.t().as_standard_layout().to_owned();
            matmul_into(gv, bt.view(), dav.view_mut());
        }
        {
            // db = aᵀ · g
            let mut acc = Array2::<T>::zeros((a.ncols(), gv.ncols()));
            matmul_tn_reduce(a, gv, &mut acc);
            as_rows_mut(&mut db).assign(&acc);
        }
        vec![Some(da), Some(db)]
    }
}

struct BmmOp {
    transpose_b: bool,
}

impl<T: Scalar> OpBackward<T> for BmmOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let a = parents[0];
        let b = parents[1];
        // Plain:      out = a·b    => da = g·bᵀ,  db = aᵀ·g
        // Transposed: out = a·bᵀ   => da = g·b,   db = gᵀ·a
        let da = bmm_value(g, b, !self.transpose_b);
        let db = if self.transpose_b {
            bmm_batched_tn(g, a)
        } else {
            bmm_batched_tn(a, g)
        };
        vec![Some(da), Some(db)]
    }
}

/// `out[b] = x[b]ᵀ · y[b]`.
fn bmm_batched_tn<T: Scalar>(x: &ArrayD<T>, y: &ArrayD<T>) -> ArrayD<T> {
    let (nb, _m, k) = view3(x);
    let (_, _, n) = view3(y);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[nb, k, n]));
    let xv = batch_mats(x);
    let yv = batch_mats(y);
    let out_slice = out.as_slice_mut().expect("contiguous");
    let chunks: Vec<(usize, &mut [T])> = out_slice.chunks_mut(k * n).enumerate().collect();
    chunks.into_par_iter().for_each(|(i, chunk)| {
        let mut o = ndarray::ArrayViewMut2::from_shape((k, n), chunk).unwrap();
        ndarray::linalg::general_mat_mul(T::one(), &xv[i].t(), &yv[i], T::zero(), &mut o);
    });
    out
}

/// `x · w` over the last axis, keeping leading axes.
struct LinearOp;

impl<T: Scalar> OpBackward<T> for LinearOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let x = as_rows(parents[0]);
        let w = as_rows(parents[1]);
        let gv = as_rows(g);
        let mut dx = ArrayD::<T>::zeros(parents[0].raw_dim());
        {
            let wt = w.t().as_standard_layout().to_owned();
            matmul_into(gv, wt.view(), as_rows_mut(&mut dx).view_mut());
        }
        let mut dw = Array2::<T>::zeros((w.nrows(), w.ncols()));
        matmul_tn_reduce(x, gv, &mut dw);
        vec![Some(dx), Some(dw.into_dyn())]
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ak, bk) = (
            *self.value(a).shape().last().unwrap(),
            self.value(b).shape()[0],
        );
        assert_eq!(self.value(a).ndim(), 2);
        assert_eq!(self.value(b).ndim(), 2);
        assert_eq!(ak, bk, "matmul: inner dims differ");
        let av = as_rows(self.value(a));
        let bv = as_rows(self.value(b));
        let mut out = ArrayD::<T>::zeros(IxDyn(&[av.nrows(), bv.ncols()]));
        matmul_into(av, bv, as_rows_mut(&mut out).view_mut());
        self.push_op(out, vec![a, b], MatmulOp)
    }

    /// Batched matrix product `[B,M,K]·[B,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let value = bmm_value(self.value(a), self.value(b), false);
        self.push_op(value, vec![a, b], BmmOp { transpose_b: false })
    }

    /// Batched product against the transposed second operand: `[B,M,K]·[B,N,K]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let value = bmm_value(self.value(a), self.value(b), true);
        self.push_op(value, vec![a, b], BmmOp { transpose_b: true })
    }

    /// `x · w` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xin = *self.value(x).shape().last().expect("non-scalar");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear: weight must be 2-d");
        assert_eq!(xin, ws[0], "linear: in-features mismatch");
        let mut out_shape = self.value(x).shape().to_vec();
        *out_shape.last_mut().unwrap() = ws[1];
        let mut out = ArrayD::<T>::zeros(IxDyn(&out_shape));
        matmul_into(
            as_rows(self.value(x)),
            as_rows(self.value(w)),
            as_rows_mut(&mut out).view_mut(),
        );
        self.push_op(out, vec![x, w], LinearOp)
    }

    /// `linear` plus bias.
    pub fn linear_bias(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.linear(x, w);
        self.add_bias(y, b)
    }
}
