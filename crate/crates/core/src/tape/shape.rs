//! Data movement: row gathers and scatters, reshapes, resampling, pooling.
//!
//! Window partitioning, cyclic shifts, patch embedding and patch merging are
//! all expressed as one primitive: a row gather over the flattened
//! leading axes with a precomputed index map. Its backward is a scatter-add,
//! applied in output order so results are deterministic.

use super::{OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Marks a padded (all-zero) source row in a gather map.
pub const PAD_ROW: usize = usize::MAX;

struct GatherRowsOp {
    map: Arc<Vec<usize>>,
    in_rows: usize,
}

impl<T: Scalar> OpBackward<T> for GatherRowsOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let c = *parents[0].shape().last().expect("non-scalar");
        let mut dx = ArrayD::<T>::zeros(parents[0].raw_dim());
        {
            let dst = dx.as_slice_mut().expect("contiguous");
            let src = g.as_slice().expect("contiguous");
            debug_assert_eq!(self.in_rows * c, dst.len());
            for (out_row, &src_row) in self.map.iter().enumerate() {
                if src_row == PAD_ROW {
                    continue;
                }
                let d = &mut dst[src_row * c..(src_row + 1) * c];
                let s = &src[out_row * c..(out_row + 1) * c];
                for (dv, &sv) in d.iter_mut().zip(s.iter()) {
                    *dv += sv;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ScatterRowsOp {
    rows: Arc<Vec<usize>>,
}

impl<T: Scalar> OpBackward<T> for ScatterRowsOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let c = *parents[0].shape().last().expect("non-scalar");
        let mut dbase = g.clone();
        let mut dvals = ArrayD::<T>::zeros(parents[1].raw_dim());
        {
            let db = dbase.as_slice_mut().expect("contiguous");
            let dv = dvals.as_slice_mut().expect("contiguous");
            let gs = g.as_slice().expect("contiguous");
            for (k, &row) in self.rows.iter().enumerate() {
                dv[k * c..(k + 1) * c].copy_from_slice(&gs[row * c..(row + 1) * c]);
                for x in &mut db[row * c..(row + 1) * c] {
                    *x = T::zero();
                }
            }
        }
        vec![Some(dbase), Some(dvals)]
    }
}

struct ReshapeOp {
    in_shape: Vec<usize>,
}

impl<T: Scalar> OpBackward<T> for ReshapeOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let dg = g
            .clone()
            .into_shape_with_order(IxDyn(&self.in_shape))
            .expect("same element count");
        vec![Some(dg)]
    }
}

/// Precomputed 1-d linear interpolation: output index -> (lo, hi, weight_hi).
#[derive(Clone)]
pub(crate) struct LinInterp {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

pub(crate) fn lin_interp(n_in: usize, n_out: usize) -> LinInterp {
    let scale = n_in as f64 / n_out as f64;
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut w_hi = Vec::with_capacity(n_out);
    for d in 0..n_out {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        lo.push(i0);
        hi.push(i1);
        w_hi.push(src - i0 as f64);
    }
    LinInterp { lo, hi, w_hi }
}

struct ResizeBilinearOp {
    ys: LinInterp,
    xs: LinInterp,
}

impl<T: Scalar> OpBackward<T> for ResizeBilinearOp {
    fn backward(
        &self,
        out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let (n, ih, iw, c) = dims4(parents[0]);
        let (_, oh, ow, _) = dims4(out);
        let mut dx = ArrayD::<T>::zeros(parents[0].raw_dim());
        let dxs = dx.as_slice_mut().expect("contiguous");
        let gs = g.as_slice().expect("contiguous");
        for b in 0..n {
            for oy in 0..oh {
                let (y0, y1, wy) = (self.ys.lo[oy], self.ys.hi[oy], self.ys.w_hi[oy]);
                for ox in 0..ow {
                    let (x0, x1, wx) = (self.xs.lo[ox], self.xs.hi[ox], self.xs.w_hi[ox]);
                    let gbase = ((b * oh + oy) * ow + ox) * c;
                    let w00 = T::cast((1.0 - wy) * (1.0 - wx));
                    let w01 = T::cast((1.0 - wy) * wx);
                    let w10 = T::cast(wy * (1.0 - wx));
                    let w11 = T::cast(wy * wx);
                    for ch in 0..c {
                        let gv = gs[gbase + ch];
                        dxs[((b * ih + y0) * iw + x0) * c + ch] += gv * w00;
                        dxs[((b * ih + y0) * iw + x1) * c + ch] += gv * w01;
                        dxs[((b * ih + y1) * iw + x0) * c + ch] += gv * w10;
                        dxs[((b * ih + y1) * iw + x1) * c + ch] += gv * w11;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct AvgPool2Op;

impl<T: Scalar> OpBackward<T> for AvgPool2Op {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let (n, ih, iw, c) = dims4(parents[0]);
        let (oh, ow) = (ih / 2, iw / 2);
        let q = T::cast(0.25);
        let mut dx = ArrayD::<T>::zeros(parents[0].raw_dim());
        let dxs = dx.as_slice_mut().expect("contiguous");
        let gs = g.as_slice().expect("contiguous");
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gbase = ((b * oh + oy) * ow + ox) * c;
                    for dy in 0..2 {
                        for dxo in 0..2 {
                            let ibase = ((b * ih + 2 * oy + dy) * iw + 2 * ox + dxo) * c;
                            for ch in 0..c {
                                dxs[ibase + ch] += gs[gbase + ch] * q;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

pub(crate) fn dims4<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected [n,h,w,c], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl<T: Scalar> Tape<T> {
    /// Row gather with a precomputed map. The input is viewed as rows of its
    /// last axis; `out_shape` must end with the same width and contain
    /// `map.len()` rows. `PAD_ROW` entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, out_shape: &[usize], map: Arc<Vec<usize>>) -> Var {
        let c = *self.value(x).shape().last().expect("non-scalar");
        let in_rows = self.value(x).len() / c;
        assert_eq!(*out_shape.last().unwrap(), c, "gather_rows: width mismatch");
        let out_rows: usize = out_shape[..out_shape.len() - 1].iter().product();
        assert_eq!(out_rows, map.len(), "gather_rows: map length mismatch");
        let mut value = ArrayD::<T>::zeros(IxDyn(out_shape));
        {
            let dst = value.as_slice_mut().expect("contiguous");
            let src = self.value(x).as_slice().expect("contiguous");
            for (out_row, &src_row) in map.iter().enumerate() {
                if src_row == PAD_ROW {
                    continue;
                }
                debug_assert!(src_row < in_rows);
                dst[out_row * c..(out_row + 1) * c]
                    .copy_from_slice(&src[src_row * c..(src_row + 1) * c]);
            }
        }
        self.push_op(value, vec![x], GatherRowsOp { map, in_rows })
    }

    /// Replace the given rows of `base` with `values` (row `k` of `values`
    /// goes to `rows[k]`); all other rows are copied bit for bit.
    pub fn scatter_rows(&mut self, base: Var, values: Var, rows: Arc<Vec<usize>>) -> Var {
        let c = *self.value(base).shape().last().expect("non-scalar");
        let vc = *self.value(values).shape().last().expect("non-scalar");
        assert_eq!(c, vc, "scatter_rows: width mismatch");
        let n_rows = self.value(base).len() / c;
        assert_eq!(
            self.value(values).len() / c,
            rows.len(),
            "scatter_rows: row count mismatch"
        );
        let mut value = self.value(base).clone();
        {
            let dst = value.as_slice_mut().expect("contiguous");
            let src = self.value(values).as_slice().expect("contiguous");
            for (k, &row) in rows.iter().enumerate() {
                assert!(row < n_rows, "scatter_rows: row out of range");
                dst[row * c..(row + 1) * c].copy_from_slice(&src[k * c..(k + 1) * c]);
            }
        }
        self.push_op(value, vec![base, values], ScatterRowsOp { rows })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(x).shape().to_vec();
        assert_eq!(
            in_shape.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.push_op(value, vec![x], ReshapeOp { in_shape })
    }

    /// Bilinear resampling of `[n,h,w,c]`, half-pixel centers, no corner
    /// alignment.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, ih, iw, c) = dims4(self.value(x));
        if ih == oh && iw == ow {
            // Still record a node so callers may treat it uniformly.
            return self.scale(x, T::one());
        }
        let ys = lin_interp(ih, oh);
        let xs = lin_interp(iw, ow);
        let mut value = ArrayD::<T>::zeros(IxDyn(&[n, oh, ow, c]));
        {
            let dst = value.as_slice_mut().expect("contiguous");
            let src = self.value(x).as_slice().expect("contiguous");
            for b in 0..n {
                for oy in 0..oh {
                    let (y0, y1, wy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
                    for ox in 0..ow {
                        let (x0, x1, wx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                        let w00 = T::cast((1.0 - wy) * (1.0 - wx));
                        let w01 = T::cast((1.0 - wy) * wx);
                        let w10 = T::cast(wy * (1.0 - wx));
                        let w11 = T::cast(wy * wx);
                        let obase = ((b * oh + oy) * ow + ox) * c;
                        let i00 = ((b * ih + y0) * iw + x0) * c;
                        let i01 = ((b * ih + y0) * iw + x1) * c;
                        let i10 = ((b * ih + y1) * iw + x0) * c;
                        let i11 = ((b * ih + y1) * iw + x1) * c;
                        for ch in 0..c {
                            dst[obase + ch] = src[i00 + ch] * w00
                                + src[i01 + ch] * w01
                                + src[i10 + ch] * w10
                                + src[i11 + ch] * w11;
                        }
                    }
                }
            }
        }
        self.push_op(value, vec![x], ResizeBilinearOp { ys, xs })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, ih, iw, c) = dims4(self.value(x));
        assert!(ih % 2 == 0 && iw % 2 == 0, "avg_pool2: odd spatial dims");
        let (oh, ow) = (ih / 2, iw / 2);
        let q = T::cast(0.25);
        let mut value = ArrayD::<T>::zeros(IxDyn(&[n, oh, ow, c]));
        {
            let dst = value.as_slice_mut().expect("contiguous");
            let src = self.value(x).as_slice().expect("contiguous");
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let obase = ((b * oh + oy) * ow + ox) * c;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let ibase = ((b * ih + 2 * oy + dy) * iw + 2 * ox + dx) * c;
                                for ch in 0..c {
                                    dst[obase + ch] += src[ibase + ch] * q;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push_op(value, vec![x], AvgPool2Op)
    }
}

/// Plain (non-tape) bilinear resize used by the data pipeline.
pub fn resize_bilinear_array<T: Scalar>(x: &ArrayD<T>, oh: usize, ow: usize) -> ArrayD<T> {
    let mut tape = Tape::<T>::new();
    let v = tape.input(x.clone());
    let r = tape.resize_bilinear(v, oh, ow);
    tape.value(r).clone()
}

/// Nearest-neighbour resize (used for ground-truth masks; keeps them binary).
pub fn resize_nearest_array<T: Scalar>(x: &ArrayD<T>, oh: usize, ow: usize) -> ArrayD<T> {
    let (n, ih, iw, c) = dims4(x);
    if ih == oh && iw == ow {
        return x.clone();
    }
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, oh, ow, c]));
    let dst = out.as_slice_mut().expect("contiguous");
    let src = x.as_slice().expect("contiguous");
    for b in 0..n {
        for oy in 0..oh {
            let iy = (oy * ih / oh).min(ih - 1);
            for ox in 0..ow {
                let ix = (ox * iw / ow).min(iw - 1);
                let obase = ((b * oh + oy) * ow + ox) * c;
                let ibase = ((b * ih + iy) * iw + ix) * c;
                dst[obase..obase + c].copy_from_slice(&src[ibase..ibase + c]);
            }
        }
    }
    out
}
