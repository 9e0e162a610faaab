//! Reusable layers: linear, conv blocks, normalization, windowed attention.

use crate::params::{Group, ParamId, ParamRegistry};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::windows;
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Exponential moving-average factor for running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon inside normalization square roots.
pub const NORM_EPS: f64 = 1e-5;
/// Hidden expansion of transformer MLPs.
pub const MLP_RATIO: usize = 4;
/// Additive mask value for cross-region attention pairs.
const MASK_NEG: f64 = -1e9;

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context: the tape being recorded, the parameter store and the
/// normalization mode.
pub struct Cx<'r, T: Scalar> {
    pub tape: Tape<T>,
    pub reg: &'r mut ParamRegistry<T>,
    pub mode: Mode,
}

impl<'r, T: Scalar> Cx<'r, T> {
    pub fn new(reg: &'r mut ParamRegistry<T>, mode: Mode) -> Self {
        Cx {
            tape: Tape::new(),
            reg,
            mode,
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: Group,
    ) -> Self {
        let w = reg.trunc_normal(format!("{name}.w"), &[d_in, d_out], group);
        let b = bias.then(|| reg.zeros(format!("{name}.b"), &[d_out], group));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let w = cx.tape.param(cx.reg, self.w);
        match self.b {
            Some(b) => {
                let b = cx.tape.param(cx.reg, b);
                cx.tape.linear_bias(x, w, b)
            }
            None => cx.tape.linear(x, w),
        }
    }
}

pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c: usize, group: Group) -> Self {
        let gamma = reg.ones(format!("{name}.gamma"), &[c], group);
        let beta = reg.zeros(format!("{name}.beta"), &[c], group);
        let run_mean = reg.state(format!("{name}.run_mean"), ArrayD::zeros(IxDyn(&[c])), group);
        let run_var = reg.state(format!("{name}.run_var"), ArrayD::ones(IxDyn(&[c])), group);
        BatchNorm {
            gamma,
            beta,
            run_mean,
            run_var,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let gamma = cx.tape.param(cx.reg, self.gamma);
        let beta = cx.tape.param(cx.reg, self.beta);
        let eps = T::cast(NORM_EPS);
        match cx.mode {
            Mode::Train => {
                let (y, mean, var) = cx.tape.batch_norm_train(x, gamma, beta, eps);
                let m = T::cast(BN_MOMENTUM);
                let one_m = T::one() - m;
                {
                    let rm = cx.reg.value_mut(self.run_mean);
                    for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                        *r = *r * one_m + b * m;
                    }
                }
                {
                    let rv = cx.reg.value_mut(self.run_var);
                    for (r, &b) in rv.iter_mut().zip(var.iter()) {
                        *r = *r * one_m + b * m;
                    }
                }
                y
            }
            Mode::Eval => {
                let mean = cx.reg.value(self.run_mean).iter().copied().collect();
                let var = cx.reg.value(self.run_var).iter().copied().collect();
                cx.tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// 3×3 convolution + batch normalization + smooth gated activation.
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        group: Group,
    ) -> Self {
        let w = reg.trunc_normal(format!("{name}.conv.w"), &[3, 3, c_in, c_out], group);
        let b = reg.zeros(format!("{name}.conv.b"), &[c_out], group);
        let bn = BatchNorm::new(reg, &format!("{name}.bn"), c_out, group);
        ConvBlock { w, b, bn, stride }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let w = cx.tape.param(cx.reg, self.w);
        let b = cx.tape.param(cx.reg, self.b);
        let y = cx.tape.conv2d_bias(x, w, b, self.stride);
        let y = self.bn.forward(cx, y);
        cx.tape.gelu(y)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c: usize, group: Group) -> Self {
        LayerNorm {
            gamma: reg.ones(format!("{name}.gamma"), &[c], group),
            beta: reg.zeros(format!("{name}.beta"), &[c], group),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let gamma = cx.tape.param(cx.reg, self.gamma);
        let beta = cx.tape.param(cx.reg, self.beta);
        cx.tape.layer_norm(x, gamma, beta, T::cast(NORM_EPS))
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, dim: usize, group: Group) -> Self {
        Mlp {
            fc1: Linear::new(reg, &format!("{name}.fc1"), dim, dim * MLP_RATIO, true, group),
            fc2: Linear::new(reg, &format!("{name}.fc2"), dim * MLP_RATIO, dim, true, group),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let h = self.fc1.forward(cx, x);
        let h = cx.tape.gelu(h);
        self.fc2.forward(cx, h)
    }
}

/// Multi-head self-attention inside (optionally shifted) square windows with
/// a learned relative position bias per head.
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        group: Group,
    ) -> Self {
        assert!(dim % heads == 0, "heads must divide dim");
        let qkv = Linear::new(reg, &format!("{name}.qkv"), dim, 3 * dim, true, group);
        let proj = Linear::new(reg, &format!("{name}.proj"), dim, dim, true, group);
        let side = 2 * window - 1;
        let bias_table = reg.trunc_normal(format!("{name}.rel_bias"), &[side * side, heads], group);
        WindowAttention {
            qkv,
            proj,
            bias_table,
            dim,
            heads,
            window,
        }
    }

    /// Effective window for a given grid side: the configured window, clamped
    /// down to the grid when the grid is smaller.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w)
    }

    /// `x`: `[n,h,w,c]`; `shifted` selects the half-window cyclic shift
    /// (disabled automatically when one window covers the whole grid).
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var, shifted: bool) -> Var {
        let shape = cx.tape.value(x).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.dim);
        let ws = self.effective_window(h, w);
        assert!(
            h % ws == 0 && w % ws == 0,
            "window {ws} does not partition {h}x{w}"
        );
        let shift = if shifted && ws < h.max(w) { ws / 2 } else { 0 };
        let nw = (h / ws) * (w / ws);
        let ntok = ws * ws;
        let hd = c / self.heads;

        let mut cur = x;
        if shift > 0 {
            let map = Arc::new(windows::cyclic_shift_map(n, h, w, shift, shift));
            cur = cx.tape.gather_rows(cur, &[n, h, w, c], map);
        }
        let part = Arc::new(windows::window_partition_map(n, h, w, ws));
        let cur = cx.tape.gather_rows(cur, &[n * nw, ntok, c], part);

        let qkv = self.qkv.forward(cx, cur);
        let b_wins = n * nw;
        let split = Arc::new(windows::head_split_map(b_wins, ntok, self.heads));
        let heads_of = |cx: &mut Cx<T>, from: usize| {
            let part = cx.tape.slice_last(qkv, from * c, (from + 1) * c);
            let part = cx.tape.reshape(part, &[b_wins, ntok, self.heads, hd]);
            cx.tape
                .gather_rows(part, &[b_wins * self.heads, ntok, hd], split.clone())
        };
        let q = heads_of(cx, 0);
        let k = heads_of(cx, 1);
        let v = heads_of(cx, 2);

        let scale = T::cast(1.0 / (hd as f64).sqrt());
        let q = cx.tape.scale(q, scale);
        let mut logits = cx.tape.bmm_nt(q, k);

        // Relative position bias, one [N,N] slab per head, shared by windows.
        let table = cx.tape.param(cx.reg, self.bias_table);
        let flat = cx.tape.reshape(table, &[(2 * ws - 1) * (2 * ws - 1) * self.heads, 1]);
        let bias_map = Arc::new(windows::rel_bias_map(ws, self.heads));
        let bias = cx
            .tape
            .gather_rows(flat, &[self.heads * ntok * ntok, 1], bias_map);
        let bias = cx.tape.reshape(bias, &[self.heads, ntok, ntok]);
        logits = cx.tape.add_tiled(logits, bias);

        if shift > 0 {
            let raw = windows::shift_mask(h, w, ws, shift, MASK_NEG);
            // Expand per-window masks across heads so one tile covers a batch
            // element: [nw·heads, N, N].
            let mut data = Vec::with_capacity(nw * self.heads * ntok * ntok);
            for wi in 0..nw {
                for _ in 0..self.heads {
                    data.extend(
                        raw[wi * ntok * ntok..(wi + 1) * ntok * ntok]
                            .iter()
                            .map(|&v| T::cast(v)),
                    );
                }
            }
            let mask = ArrayD::from_shape_vec(
                IxDyn(&[nw * self.heads, ntok, ntok]),
                data,
            )
            .unwrap();
            let mask = cx.tape.constant(mask);
            logits = cx.tape.add_tiled(logits, mask);
        }

        let attn = cx.tape.softmax_last(logits);
        let out = cx.tape.bmm(attn, v);
        let merge = Arc::new(windows::head_merge_map(b_wins, ntok, self.heads));
        let out = cx
            .tape
            .gather_rows(out, &[b_wins, ntok, self.heads, hd], merge);
        let out = cx.tape.reshape(out, &[b_wins, ntok, c]);
        let out = self.proj.forward(cx, out);

        let rev = Arc::new(windows::window_reverse_map(n, h, w, ws));
        let mut out = cx.tape.gather_rows(out, &[n, h, w, c], rev);
        if shift > 0 {
            let unmap = Arc::new(windows::cyclic_shift_map(n, h, w, h - shift, w - shift));
            out = cx.tape.gather_rows(out, &[n, h, w, c], unmap);
        }
        out
    }
}

/// Pre-norm transformer block: windowed attention and MLP, both residual.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: WindowAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub shifted: bool,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        group: Group,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(reg, &format!("{name}.ln1"), dim, group),
            attn: WindowAttention::new(reg, &format!("{name}.attn"), dim, heads, window, group),
            ln2: LayerNorm::new(reg, &format!("{name}.ln2"), dim, group),
            mlp: Mlp::new(reg, &format!("{name}.mlp"), dim, group),
            shifted,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let normed = self.ln1.forward(cx, x);
        let attended = self.attn.forward(cx, normed, self.shifted);
        let x = cx.tape.add(x, attended);
        let normed = self.ln2.forward(cx, x);
        let shape = cx.tape.value(normed).shape().to_vec();
        let rows: usize = shape[..3].iter().product();
        let flat = cx.tape.reshape(normed, &[rows, shape[3]]);
        let expanded = self.mlp.forward(cx, flat);
        let expanded = cx.tape.reshape(expanded, &shape);
        cx.tape.add(x, expanded)
    }
}

/// 2×2 patch merging: halves the grid, doubles the channels.
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c_in: usize, group: Group) -> Self {
        PatchMerge {
            norm: LayerNorm::new(reg, &format!("{name}.norm"), 4 * c_in, group),
            reduce: Linear::new(reg, &format!("{name}.reduce"), 4 * c_in, 2 * c_in, false, group),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let shape = cx.tape.value(x).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "merge needs even dims");
        let map = Arc::new(windows::merge_map(n, h, w));
        let grouped = cx.tape.gather_rows(x, &[n, h / 2, w / 2, 4, c], map);
        let grouped = cx.tape.reshape(grouped, &[n, h / 2, w / 2, 4 * c]);
        let normed = self.norm.forward(cx, grouped);
        self.reduce.forward(cx, normed)
    }
}
