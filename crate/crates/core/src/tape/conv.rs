//! 2-d convolution over `[n,h,w,c]` with zero SAME padding.
//!
//! Stride 1 uses a shift-GEMM formulation: for every kernel offset the valid
//! input rows multiply one `cin×cout` slice of the weight, accumulating into
//! shifted output rows. This avoids materializing im2col buffers for the
//! large stride-1 convolutions that dominate training. Strided convolutions
//! (only used on small feature maps) go through a transient im2col buffer.
//!
//! Determinism: accumulation order over kernel offsets is fixed, and the
//! parallel row splits use fixed chunk sizes.

use super::shape::dims4;
use super::{OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

/// Rows per parallel slab in the stride-1 path.
const ROW_CHUNK: usize = 32;

struct Conv2dOp {
    kh: usize,
    kw: usize,
    stride: usize,
}

fn weight_dims<T: Scalar>(w: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 4, "conv weight must be [kh,kw,cin,cout]");
    (s[0], s[1], s[2], s[3])
}

/// Forward, stride 1, SAME padding.
fn conv_s1_forward<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>) -> ArrayD<T> {
    let (n, h, wdt, cin) = dims4(x);
    let (kh, kw, wcin, cout) = weight_dims(w);
    assert_eq!(cin, wcin);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, h, wdt, cout]));
    let xs = x.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let os = out.as_slice_mut().expect("contiguous");
    for dy in 0..kh {
        for dx in 0..kw {
            let wk = ArrayView2::from_shape(
                (cin, cout),
                &ws[(dy * kw + dx) * cin * cout..(dy * kw + dx + 1) * cin * cout],
            )
            .unwrap();
            // out[b, oy, ox] += x[b, oy+dy-ph, ox+dx-pw] · wk  for valid rows
            let oy_lo = ph.saturating_sub(dy);
            let oy_hi = (h + ph).saturating_sub(dy).min(h);
            let ox_lo = pw.saturating_sub(dx);
            let ox_hi = (wdt + pw).saturating_sub(dx).min(wdt);
            if ox_lo >= ox_hi {
                continue;
            }
            let span = ox_hi - ox_lo;
            // Jobs are (b, block of oy) slabs: disjoint output rows.
            let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
            for b in 0..n {
                let mut oy = oy_lo;
                while oy < oy_hi {
                    let oy_end = (oy + ROW_CHUNK).min(oy_hi);
                    jobs.push((b, oy, oy_end));
                    oy = oy_end;
                }
            }
            let out_ptr = SendPtr(os.as_mut_ptr());
            jobs.into_par_iter().for_each(|(b, oy0, oy1)| {
                let out_ptr = &out_ptr;
                for oy in oy0..oy1 {
                    let iy = oy + dy - ph;
                    let ix0 = ox_lo + dx - pw;
                    let xrow = ArrayView2::from_shape(
                        (span, cin),
                        &xs[((b * h + iy) * wdt + ix0) * cin..][..span * cin],
                    )
                    .unwrap();
                    // Safety: each job writes a disjoint [b, oy, ox_lo..ox_hi]
                    // slab of the output.
                    let orow = unsafe {
                        std::slice::from_raw_parts_mut(
                            out_ptr.0.add(((b * h + oy) * wdt + ox_lo) * cout),
                            span * cout,
                        )
                    };
                    let mut ov = ArrayViewMut2::from_shape((span, cout), orow).unwrap();
                    general_mat_mul(T::one(), &xrow, &wk, T::one(), &mut ov);
                }
            });
        }
    }
    out
}

/// Backward w.r.t. input, stride 1.
fn conv_s1_backward_input<T: Scalar>(
    g: &ArrayD<T>,
    w: &ArrayD<T>,
    x_dims: (usize, usize, usize, usize),
) -> ArrayD<T> {
    let (n, h, wdt, cin) = x_dims;
    let (kh, kw, _, cout) = weight_dims(w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, h, wdt, cin]));
    let gs = g.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let dxs = dx.as_slice_mut().expect("contiguous");
    for dy in 0..kh {
        for dx_off in 0..kw {
            let wk = ArrayView2::from_shape(
                (cin, cout),
                &ws[(dy * kw + dx_off) * cin * cout..(dy * kw + dx_off + 1) * cin * cout],
            )
            .unwrap();
            let wk_t = wk.t().as_standard_layout().to_owned();
            // dx[b, iy, ix] += g[b, iy-dy+ph, ix-dx+pw] · wkᵀ  for valid rows
            let oy_lo = ph.saturating_sub(dy);
            let oy_hi = (h + ph).saturating_sub(dy).min(h);
            let ox_lo = pw.saturating_sub(dx_off);
            let ox_hi = (wdt + pw).saturating_sub(dx_off).min(wdt);
            if ox_lo >= ox_hi {
                continue;
            }
            let span = ox_hi - ox_lo;
            let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
            for b in 0..n {
                let mut oy = oy_lo;
                while oy < oy_hi {
                    let oy_end = (oy + ROW_CHUNK).min(oy_hi);
                    jobs.push((b, oy, oy_end));
                    oy = oy_end;
                }
            }
            let dx_ptr = SendPtr(dxs.as_mut_ptr());
            let wk_t = wk_t.view();
            jobs.into_par_iter().for_each(|(b, oy0, oy1)| {
                let dx_ptr = &dx_ptr;
                for oy in oy0..oy1 {
                    let iy = oy + dy - ph;
                    let ix0 = ox_lo + dx_off - pw;
                    let grow = ArrayView2::from_shape(
                        (span, cout),
                        &gs[((b * h + oy) * wdt + ox_lo) * cout..][..span * cout],
                    )
                    .unwrap();
                    // Safety: for a fixed kernel offset the written input
                    // rows (b, iy, ix0..) are disjoint across jobs.
                    let drow = unsafe {
                        std::slice::from_raw_parts_mut(
                            dx_ptr.0.add(((b * h + iy) * wdt + ix0) * cin),
                            span * cin,
                        )
                    };
                    let mut dv = ArrayViewMut2::from_shape((span, cin), drow).unwrap();
                    general_mat_mul(T::one(), &grow, &wk_t, T::one(), &mut dv);
                }
            });
        }
    }
    dx
}

/// Backward w.r.t. weights, stride 1. Partials are reduced in fixed order.
fn conv_s1_backward_weight<T: Scalar>(
    x: &ArrayD<T>,
    g: &ArrayD<T>,
    kh: usize,
    kw: usize,
    cout: usize,
) -> ArrayD<T> {
    let (n, h, wdt, cin) = dims4(x);
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.as_slice().expect("contiguous");
    let gs = g.as_slice().expect("contiguous");
    let mut dw = ArrayD::<T>::zeros(IxDyn(&[kh, kw, cin, cout]));
    let dws = dw.as_slice_mut().expect("contiguous");
    for dy in 0..kh {
        for dx in 0..kw {
            let oy_lo = ph.saturating_sub(dy);
            let oy_hi = (h + ph).saturating_sub(dy).min(h);
            let ox_lo = pw.saturating_sub(dx);
            let ox_hi = (wdt + pw).saturating_sub(dx).min(wdt);
            if ox_lo >= ox_hi {
                continue;
            }
            let span = ox_hi - ox_lo;
            let rows: Vec<(usize, usize)> = (0..n)
                .flat_map(|b| (oy_lo..oy_hi).map(move |oy| (b, oy)))
                .collect();
            let partials: Vec<Array2<T>> = rows
                .par_chunks(64)
                .map(|chunk| {
                    let mut acc = Array2::<T>::zeros((cin, cout));
                    for &(b, oy) in chunk {
                        let iy = oy + dy - ph;
                        let ix0 = ox_lo + dx - pw;
                        let xrow = ArrayView2::from_shape(
                            (span, cin),
                            &xs[((b * h + iy) * wdt + ix0) * cin..][..span * cin],
                        )
                        .unwrap();
                        let grow = ArrayView2::from_shape(
                            (span, cout),
                            &gs[((b * h + oy) * wdt + ox_lo) * cout..][..span * cout],
                        )
                        .unwrap();
                        general_mat_mul(T::one(), &xrow.t(), &grow, T::one(), &mut acc);
                    }
                    acc
                })
                .collect();
            let base = (dy * kw + dx) * cin * cout;
            for p in partials {
                let ps = p.as_slice().expect("contiguous");
                for (d, &v) in dws[base..base + cin * cout].iter_mut().zip(ps.iter()) {
                    *d += v;
                }
            }
        }
    }
    dw
}

/// im2col for strided convolutions (small feature maps only).
fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> (Array2<T>, usize, usize) {
    let (n, h, w, cin) = dims4(x);
    assert!(h % stride == 0 && w % stride == 0, "stride must divide dims");
    let (oh, ow) = (h / stride, w / stride);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let xs = x.as_slice().expect("contiguous");
    let mut col = Array2::<T>::zeros((n * oh * ow, kh * kw * cin));
    {
        let cs = col.as_slice_mut().expect("contiguous");
        let width = kh * kw * cin;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - ph as isize;
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - pw as isize;
                            let dst = &mut cs
                                [row * width + (dy * kw + dx) * cin..][..cin];
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue; // stays zero
                            }
                            let src =
                                &xs[((b * h + iy as usize) * w + ix as usize) * cin..][..cin];
                            dst.copy_from_slice(src);
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im_add<T: Scalar>(
    dcol: &Array2<T>,
    x_dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
) -> ArrayD<T> {
    let (n, h, w, cin) = x_dims;
    let (oh, ow) = (h / stride, w / stride);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, h, w, cin]));
    let dxs = dx.as_slice_mut().expect("contiguous");
    let cs = dcol.as_slice().expect("contiguous");
    let width = kh * kw * cin;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - ph as isize;
                    for dx_off in 0..kw {
                        let ix = (ox * stride + dx_off) as isize - pw as isize;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &cs[row * width + (dy * kw + dx_off) * cin..][..cin];
                        let dst = &mut dxs
                            [((b * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T: Scalar> OpBackward<T> for Conv2dOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let x = parents[0];
        let w = parents[1];
        let (_, _, _, cout) = weight_dims(w);
        if self.stride == 1 {
            let dx = conv_s1_backward_input(g, w, dims4(x));
            let dw = conv_s1_backward_weight(x, g, self.kh, self.kw, cout);
            vec![Some(dx), Some(dw)]
        } else {
            let (col, oh, ow) = im2col(x, self.kh, self.kw, self.stride);
            let (n, _, _, _) = dims4(x);
            let gv = ArrayView2::from_shape(
                (n * oh * ow, cout),
                g.as_slice().expect("contiguous"),
            )
            .unwrap();
            // dW = colᵀ·g
            let mut dw2 = Array2::<T>::zeros((col.ncols(), cout));
            super::gemm::matmul_tn_reduce(col.view(), gv, &mut dw2);
            let dw = dw2
                .into_dyn()
                .into_shape_with_order(IxDyn(&[self.kh, self.kw, col.ncols() / (self.kh * self.kw), cout]))
                .unwrap();
            // dcol = g·Wᵀ
            let ws = ArrayView2::from_shape(
                (dw.len() / cout, cout),
                w.as_slice().expect("contiguous"),
            )
            .unwrap();
            let mut dcol = Array2::<T>::zeros((gv.nrows(), ws.nrows()));
            let wt = ws.t().as_standard_layout().to_owned();
            super::gemm::matmul_into(gv, wt.view(), dcol.view_mut());
            let dx = col2im_add(&dcol, dims4(x), self.kh, self.kw, self.stride);
            vec![Some(dx), Some(dw)]
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Convolution with SAME zero padding. `w` is `[kh,kw,cin,cout]`; kernel
    /// sides must be odd. Output spatial dims are `h/stride × w/stride`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (n, h, wdt, cin) = dims4(self.value(x));
        let (kh, kw, wcin, cout) = weight_dims(self.value(w));
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: even kernel");
        assert!(stride >= 1);
        let value = if stride == 1 {
            conv_s1_forward(self.value(x), self.value(w))
        } else {
            assert!(
                h % stride == 0 && wdt % stride == 0,
                "conv2d: stride must divide spatial dims"
            );
            let (col, oh, ow) = im2col(self.value(x), kh, kw, stride);
            let ws = ArrayView2::from_shape(
                (kh * kw * cin, cout),
                self.value(w).as_slice().expect("contiguous"),
            )
            .unwrap();
            let mut out = Array2::<T>::zeros((n * oh * ow, cout));
            super::gemm::matmul_into(col.view(), ws, out.view_mut());
            out.into_dyn()
                .into_shape_with_order(IxDyn(&[n, oh, ow, cout]))
                .unwrap()
        };
        self.push_op(value, vec![x, w], Conv2dOp { kh, kw, stride })
    }

    /// `conv2d` plus per-channel bias.
    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let y = self.conv2d(x, w, stride);
        self.add_bias(y, b)
    }
}
