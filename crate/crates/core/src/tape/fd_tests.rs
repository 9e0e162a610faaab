//! Finite-difference and value-oracle tests for every tape operation.

use super::{Tape, Var};
use crate::gradcheck::{check_scalar_fn, seeded_uniform};
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Run `build` leaves→scalar through a fresh tape; used for FD checks.
fn fd_check(
    leaves: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    eps: f64,
    threshold: f64,
) {
    let report = check_scalar_fn(
        leaves,
        |ls, want| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = ls.iter().map(|l| tape.input(l.clone())).collect();
            let out = build(&mut tape, &vars);
            let w = seeded_uniform(tape.value(out).shape(), -1.0, 1.0, 0xFEED);
            let s = tape.weighted_sum(out, w);
            let val = tape.scalar(s);
            if !want {
                return (val, vec![]);
            }
            let grads = tape.backward(s);
            let gs = vars
                .iter()
                .map(|&v| grads.get_or_zeros(&tape, v))
                .collect();
            (val, gs)
        },
        eps,
        60,
        42,
    );
    assert!(
        report.max_rel_err < threshold,
        "max relative error {} over {} coords (threshold {})",
        report.max_rel_err,
        report.coords_checked,
        threshold
    );
}

fn arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
    seeded_uniform(shape, -1.0, 1.0, seed)
}

#[test]
fn fd_elementwise_ops() {
    let a = arr(&[2, 3, 4], 1);
    let b = arr(&[2, 3, 4], 2);
    fd_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-5, 1e-7);
    fd_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-5, 1e-8);
    fd_check(&[a.clone()], |t, v| t.scale(v[0], 1.7), 1e-5, 1e-7);
    let bias = arr(&[4], 3);
    fd_check(
        &[a.clone(), bias],
        |t, v| t.add_bias(v[0], v[1]),
        1e-5,
        1e-7,
    );
    let tile = arr(&[3, 4], 4);
    fd_check(
        &[a.clone(), tile],
        |t, v| t.add_tiled(v[0], v[1]),
        1e-5,
        1e-7,
    );
}

#[test]
fn fd_concat_slice_reshape() {
    let a = arr(&[2, 3, 2], 5);
    let b = arr(&[2, 3, 5], 6);
    fd_check(
        &[a.clone(), b.clone()],
        |t, v| t.concat_last(&[v[0], v[1]]),
        1e-5,
        1e-7,
    );
    fd_check(&[b.clone()], |t, v| t.slice_last(v[0], 1, 4), 1e-5, 1e-7);
    fd_check(&[a.clone()], |t, v| t.reshape(v[0], &[6, 2]), 1e-5, 1e-7);
}

#[test]
fn fd_matmul_family() {
    let a = arr(&[5, 3], 7);
    let b = arr(&[3, 4], 8);
    fd_check(&[a, b], |t, v| t.matmul(v[0], v[1]), 1e-5, 1e-8);
    let ba = arr(&[3, 4, 2], 9);
    let bb = arr(&[3, 2, 5], 10);
    fd_check(&[ba.clone(), bb], |t, v| t.bmm(v[0], v[1]), 1e-5, 1e-8);
    let bc = arr(&[3, 5, 2], 11);
    fd_check(&[ba, bc], |t, v| t.bmm_nt(v[0], v[1]), 1e-5, 1e-8);
    let x = arr(&[2, 3, 6], 12);
    let w = arr(&[6, 4], 13);
    let bias = arr(&[4], 14);
    fd_check(
        &[x, w, bias],
        |t, v| t.linear_bias(v[0], v[1], v[2]),
        1e-5,
        1e-8,
    );
}

#[test]
fn matmul_matches_naive_oracle() {
    let a = arr(&[4, 3], 20);
    let b = arr(&[3, 5], 21);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
    let out = tape.matmul(va, vb);
    for i in 0..4 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a[[i, k]] * b[[k, j]];
            }
            let got = tape.value(out)[[i, j]];
            assert!((got - s).abs() < 1e-12, "({i},{j}): {got} vs {s}");
        }
    }
}

/// Naive direct convolution used as the oracle.
fn conv_oracle(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
) -> ArrayD<f64> {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h / stride, wd / stride);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, oh, ow, cout]));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - ph as isize;
                            let ix = (ox * stride + dx) as isize - pw as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x[[b, iy as usize, ix as usize, ci]]
                                    * w[[dy, dx, ci, co]];
                            }
                        }
                    }
                    out[[b, oy, ox, co]] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_oracle() {
    for &(stride, h) in &[(1usize, 6usize), (2, 6)] {
        let x = arr(&[2, h, h, 3], 30 + stride as u64);
        let w = arr(&[3, 3, 3, 4], 31);
        let mut tape = Tape::<f64>::new();
        let (vx, vw) = (tape.input(x.clone()), tape.input(w.clone()));
        let out = tape.conv2d(vx, vw, stride);
        let want = conv_oracle(&x, &w, stride);
        let diff = tape
            .value(out)
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "stride {stride}: max diff {diff}");
    }
}

#[test]
fn fd_conv2d() {
    let x = arr(&[2, 6, 6, 3], 32);
    let w = arr(&[3, 3, 3, 4], 33);
    let b = arr(&[4], 34);
    fd_check(
        &[x.clone(), w.clone(), b.clone()],
        |t, v| t.conv2d_bias(v[0], v[1], v[2], 1),
        1e-5,
        1e-7,
    );
    fd_check(
        &[x, w, b],
        |t, v| t.conv2d_bias(v[0], v[1], v[2], 2),
        1e-5,
        1e-7,
    );
}

#[test]
fn fd_norms() {
    let x = arr(&[3, 2, 2, 4], 40);
    let gamma = seeded_uniform(&[4], 0.5, 1.5, 41);
    let beta = arr(&[4], 42);
    fd_check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).0,
        1e-6,
        1e-6,
    );
    fd_check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| {
            t.batch_norm_eval(
                v[0],
                v[1],
                v[2],
                vec![0.1, -0.2, 0.3, 0.0],
                vec![1.1, 0.9, 1.3, 0.7],
                1e-5,
            )
        },
        1e-6,
        1e-7,
    );
    fd_check(
        &[x, gamma, beta],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        1e-6,
        1e-6,
    );
}

#[test]
fn fd_activations() {
    let x = arr(&[2, 5, 3], 50);
    fd_check(&[x.clone()], |t, v| t.gelu(v[0]), 1e-5, 1e-8);
    fd_check(&[x.clone()], |t, v| t.sigmoid(v[0]), 1e-5, 1e-8);
    fd_check(&[x], |t, v| t.softmax_last(v[0]), 1e-5, 1e-7);
}

#[test]
fn softmax_rows_are_convex_weights() {
    let x = arr(&[4, 6], 51);
    let mut tape = Tape::<f64>::new();
    let vx = tape.input(x);
    let y = tape.softmax_last(vx);
    for row in super::as_rows(tape.value(y)).rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn fd_pool_and_resize() {
    let x = arr(&[2, 4, 4, 3], 60);
    fd_check(&[x.clone()], |t, v| t.avg_pool2(v[0]), 1e-5, 1e-7);
    fd_check(
        &[x.clone()],
        |t, v| t.resize_bilinear(v[0], 8, 8),
        1e-5,
        1e-8,
    );
    let big = arr(&[1, 8, 8, 2], 61);
    fd_check(&[big], |t, v| t.resize_bilinear(v[0], 4, 4), 1e-5, 1e-8);
}

#[test]
fn bilinear_identity_and_constant() {
    let x = arr(&[1, 5, 5, 2], 62);
    let mut tape = Tape::<f64>::new();
    let vx = tape.input(x.clone());
    let same = tape.resize_bilinear(vx, 5, 5);
    assert_eq!(tape.value(same), &x);
    let c = ArrayD::from_elem(IxDyn(&[1, 4, 4, 1]), 0.37);
    let vc = tape.input(c);
    let up = tape.resize_bilinear(vc, 9, 9);
    assert!(tape.value(up).iter().all(|&v| (v - 0.37).abs() < 1e-12));
}

#[test]
fn fd_gather_scatter() {
    let x = arr(&[2, 3, 4], 70);
    let map = Arc::new(vec![5usize, 0, super::PAD_ROW, 3, 3, 1]);
    fd_check(
        &[x.clone()],
        {
            let map = map.clone();
            move |t, v| t.gather_rows(v[0], &[6, 4], map.clone())
        },
        1e-5,
        1e-7,
    );
    let base = arr(&[6, 4], 71);
    let vals = arr(&[2, 4], 72);
    let rows = Arc::new(vec![1usize, 4]);
    fd_check(
        &[base, vals],
        {
            let rows = rows.clone();
            move |t, v| t.scatter_rows(v[0], v[1], rows.clone())
        },
        1e-5,
        1e-7,
    );
}

#[test]
fn gather_scatter_round_trip_is_identity() {
    let base = arr(&[5, 3], 80);
    let rows = Arc::new(vec![4usize, 2, 0]);
    let mut tape = Tape::<f64>::new();
    let vb = tape.input(base.clone());
    let gathered = tape.gather_rows(vb, &[3, 3], Arc::new(rows.to_vec()));
    let back = tape.scatter_rows(vb, gathered, rows);
    assert_eq!(tape.value(back), &base, "bitwise round trip");
}

#[test]
fn fd_losses() {
    let p = seeded_uniform(&[3, 4], 0.05, 0.95, 90);
    let g = seeded_uniform(&[3, 4], 0.0, 1.0, 91).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let target = Arc::new(g.clone());
    fd_check(
        &[p.clone()],
        {
            let target = target.clone();
            move |t, v| t.bce_loss(v[0], target.clone())
        },
        1e-6,
        1e-7,
    );
    fd_check(
        &[p.clone()],
        {
            let target = target.clone();
            move |t, v| t.iou_loss(v[0], target.clone())
        },
        1e-6,
        1e-7,
    );

    // Loop oracle for the values themselves.
    let mut tape = Tape::<f64>::new();
    let vp = tape.input(p.clone());
    let bce = tape.bce_loss(vp, target.clone());
    let iou = tape.iou_loss(vp, target.clone());
    let mut bce_want = 0.0;
    let (mut inter, mut union) = (1.0, 1.0);
    for (&pv, &gv) in p.iter().zip(g.iter()) {
        let pc = pv.clamp(1e-7, 1.0 - 1e-7);
        bce_want += -(gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln());
        inter += pv * gv;
        union += pv + gv - pv * gv;
    }
    bce_want /= p.len() as f64;
    assert!((tape.scalar(bce) - bce_want).abs() < 1e-12);
    assert!((tape.scalar(iou) - (1.0 - inter / union)).abs() < 1e-12);
}

#[test]
fn fd_scalar_combinators() {
    let a = arr(&[3, 3], 95);
    fd_check(&[a.clone()], |t, v| t.mean_all(v[0]), 1e-5, 1e-7);
    fd_check(
        &[a.clone(), a.clone()],
        |t, v| {
            let m0 = t.mean_all(v[0]);
            let m1 = t.mean_all(v[1]);
            t.linear_combination(&[(0.3, m0), (1.7, m1)])
        },
        1e-5,
        1e-7,
    );
}

#[test]
fn shared_leaf_accumulates_both_paths() {
    // f(x) = sum(x·x) via two separate uses of the same node.
    let x = arr(&[2, 2], 96);
    let mut tape = Tape::<f64>::new();
    let vx = tape.input(x.clone());
    let prod = tape.mul(vx, vx);
    let s = tape.weighted_sum(prod, ArrayD::ones(IxDyn(&[2, 2])));
    let grads = tape.backward(s);
    let gx = grads.get(vx).unwrap();
    for (gv, xv) in gx.iter().zip(x.iter()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}
