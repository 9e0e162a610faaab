//! Pixel-wise boundary refinement: select the top-K guide pixels, enrich
//! them with globally attended deep features, re-predict their saliency and
//! scatter the corrections back into the prediction map.

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Cx, Linear};
use crate::params::{Group, ParamRegistry};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::ArrayD;
use std::sync::Arc;

/// Ordered top-K selection over one `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelIndexSet {
    /// Flat indices, ranked by guide value (ties broken by lowest index).
    pub indices: Vec<usize>,
    pub shape: (usize, usize),
}

impl PixelIndexSet {
    /// All positions in flat order (used for full-overwrite cases).
    pub fn all(h: usize, w: usize) -> Self {
        PixelIndexSet {
            indices: (0..h * w).collect(),
            shape: (h, w),
        }
    }
}

/// Indices of the `k` largest guide values; ties broken by lowest flat index.
pub fn select_top_k<T: Scalar>(guide: &ArrayD<T>, k: usize) -> Result<PixelIndexSet> {
    let s = guide.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[2] == 1 => (s[0], s[1]),
        _ => {
            return Err(Error::dim(
                "select_top_k",
                format!("guide must be [h,w] or [h,w,1], got {s:?}"),
            ))
        }
    };
    let hw = h * w;
    if k < 1 || k > hw {
        return Err(Error::contract(
            "select_top_k",
            format!("k={k} outside 1..={hw}"),
        ));
    }
    let vals = guide.as_slice().expect("contiguous");
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| {
        vals[b]
            .partial_cmp(&vals[a])
            .expect("finite guide values")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(PixelIndexSet {
        indices: order,
        shape: (h, w),
    })
}

/// Default selection size: proportional to the boundary length of the grid.
pub fn default_k(h: usize, w: usize) -> usize {
    let k = (4.0 * ((h * w) as f64).sqrt()).round() as usize;
    k.clamp(1, h * w)
}

/// Absolute tape rows (into a flattened `[n,h,w,·]` value) for per-sample
/// selections.
fn absolute_rows(sets: &[PixelIndexSet]) -> Arc<Vec<usize>> {
    let mut rows = Vec::new();
    for (b, set) in sets.iter().enumerate() {
        let hw = set.shape.0 * set.shape.1;
        rows.extend(set.indices.iter().map(|&i| b * hw + i));
    }
    Arc::new(rows)
}

/// Gather per-pixel feature rows: `feat` is `[n,h,w,c]`, output `[n·K, c]`.
pub fn gather_pixels<T: Scalar>(
    tape: &mut Tape<T>,
    feat: Var,
    sets: &[PixelIndexSet],
) -> Result<Var> {
    let s = tape.value(feat).shape().to_vec();
    if s.len() != 4 || s[0] != sets.len() {
        return Err(Error::dim(
            "gather_pixels",
            format!("feature {s:?} does not match {} selections", sets.len()),
        ));
    }
    for set in sets {
        if set.shape != (s[1], s[2]) {
            return Err(Error::dim(
                "gather_pixels",
                format!(
                    "selection over {:?} applied to {}x{} feature",
                    set.shape, s[1], s[2]
                ),
            ));
        }
    }
    let rows = absolute_rows(sets);
    let total = rows.len();
    Ok(tape.gather_rows(feat, &[total, s[3]], rows))
}

/// Write re-predicted pixel values into `base` at the selected positions,
/// leaving everything else bit-identical.
pub fn scatter_refine<T: Scalar>(
    tape: &mut Tape<T>,
    base: Var,
    values: Var,
    sets: &[PixelIndexSet],
) -> Result<Var> {
    let s = tape.value(base).shape().to_vec();
    if s.len() != 4 || s[0] != sets.len() || s[3] != 1 {
        return Err(Error::dim(
            "scatter_refine",
            format!("base {s:?} does not match {} selections", sets.len()),
        ));
    }
    for set in sets {
        if set.shape != (s[1], s[2]) {
            return Err(Error::dim(
                "scatter_refine",
                format!("selection {:?} vs map {}x{}", set.shape, s[1], s[2]),
            ));
        }
    }
    let rows = absolute_rows(sets);
    let nv = tape.value(values).len();
    if nv != rows.len() {
        return Err(Error::contract(
            "scatter_refine",
            format!("{nv} values for {} selected pixels", rows.len()),
        ));
    }
    let values = tape.reshape(values, &[nv, 1]);
    Ok(tape.scatter_rows(base, values, rows))
}

/// Single-head full self-attention with learned projections.
pub struct GlobalAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
}

impl GlobalAttention {
    fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, dim: usize, group: Group) -> Self {
        GlobalAttention {
            q: Linear::new(reg, &format!("{name}.q"), dim, dim, false, group),
            k: Linear::new(reg, &format!("{name}.k"), dim, dim, false, group),
            v: Linear::new(reg, &format!("{name}.v"), dim, dim, false, group),
            dim,
        }
    }

    /// `x`: `[n, m, c]` token batch.
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, x: Var) -> Var {
        let q = self.q.forward(cx, x);
        let k = self.k.forward(cx, x);
        let v = self.v.forward(cx, x);
        let q = cx.tape.scale(q, T::cast(1.0 / (self.dim as f64).sqrt()));
        let logits = cx.tape.bmm_nt(q, k);
        let attn = cx.tape.softmax_last(logits);
        cx.tape.bmm(attn, v)
    }
}

/// Where the refiner's selection guide comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideSource {
    /// The block's edge prediction (default).
    Edge,
    /// `|P − 0.5|` on the block's saliency prediction (edge-free variant).
    AbsDiff,
}

/// One refinement site: parameters are specific to the decoder block the
/// refiner is attached to.
pub struct PixelRefiner {
    pub g_reduce: Vec<ConvBlock>,
    pub f_reduce: Vec<ConvBlock>,
    pub g_attn: GlobalAttention,
    pub f_attn: GlobalAttention,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl PixelRefiner {
    /// `c_enc`: encoder/decoder feature channels; `c_deep_f`: channels of the
    /// fused coarse feature; `dim`: common projection width.
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        c_enc: usize,
        c_deep_f: usize,
        dim: usize,
        group: Group,
    ) -> Self {
        let mk_chain = |reg: &mut ParamRegistry<T>, tag: &str, c_in: usize| -> Vec<ConvBlock> {
            (0..3)
                .map(|t| {
                    let cin = if t == 0 { c_in } else { dim };
                    ConvBlock::new(reg, &format!("{name}.{tag}{t}"), cin, dim, 2, group)
                })
                .collect()
        };
        let g_reduce = mk_chain(reg, "g_cb", c_enc);
        let f_reduce = mk_chain(reg, "f_cb", c_deep_f);
        PixelRefiner {
            g_reduce,
            f_reduce,
            g_attn: GlobalAttention::new(reg, &format!("{name}.g_attn"), dim, group),
            f_attn: GlobalAttention::new(reg, &format!("{name}.f_attn"), dim, group),
            wq: Linear::new(reg, &format!("{name}.wq"), c_enc, dim, false, group),
            wk: Linear::new(reg, &format!("{name}.wk"), dim, dim, false, group),
            wv: Linear::new(reg, &format!("{name}.wv"), dim, dim, false, group),
            fc1: Linear::new(reg, &format!("{name}.fc1"), dim, c_enc, true, group),
            fc2: Linear::new(reg, &format!("{name}.fc2"), c_enc, 1, true, group),
            dim,
        }
    }

    /// Three stride-2 reductions then full self-attention; `[n,s,s,c]` to
    /// `[n, (s/8)², dim]`.
    pub fn global_features<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        g_deep: Var,
        f_deep: Var,
    ) -> Result<(Var, Var)> {
        let check = |v: &ArrayD<T>| -> Result<(usize, usize)> {
            let s = v.shape();
            if s[1] % 8 != 0 || s[2] % 8 != 0 {
                return Err(Error::dim(
                    "global_features",
                    format!("side {}x{} not divisible by 8", s[1], s[2]),
                ));
            }
            Ok((s[0], s[1] / 8 * (s[2] / 8)))
        };
        let (n, m) = check(cx.tape.value(g_deep))?;
        check(cx.tape.value(f_deep))?;
        let mut g = g_deep;
        for cb in &self.g_reduce {
            g = cb.forward(cx, g);
        }
        let mut f = f_deep;
        for cb in &self.f_reduce {
            f = cb.forward(cx, f);
        }
        let g = cx.tape.reshape(g, &[n, m, self.dim]);
        let f = cx.tape.reshape(f, &[n, m, self.dim]);
        let po_conv = self.g_attn.forward(cx, g);
        let po_f = self.f_attn.forward(cx, f);
        Ok((po_conv, po_f))
    }

    /// Edge-global similarity `σ(Wq(PI_conv) · Wk(PO_conv)ᵀ)`.
    ///
    /// `pi_conv`: `[n, k, c_enc]`, `po_conv`: `[n, m, dim]` → `[n, k, m]`.
    pub fn edge_global_similarity<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        pi_conv: Var,
        po_conv: Var,
    ) -> Result<Var> {
        let sp = cx.tape.value(pi_conv).shape().to_vec();
        let so = cx.tape.value(po_conv).shape().to_vec();
        if sp.len() != 3 || so.len() != 3 || sp[0] != so[0] {
            return Err(Error::dim(
                "edge_global_similarity",
                format!("operands {sp:?} vs {so:?}"),
            ));
        }
        let q = self.wq.forward(cx, pi_conv);
        let k = self.wk.forward(cx, po_conv);
        let logits = cx.tape.bmm_nt(q, k);
        Ok(cx.tape.sigmoid(logits))
    }

    /// Project global values through the similarity: `S_EG · Wv(PO_f)`.
    pub fn reproject<T: Scalar>(&self, cx: &mut Cx<T>, s_eg: Var, po_f: Var) -> Result<Var> {
        let ss = cx.tape.value(s_eg).shape().to_vec();
        let sf = cx.tape.value(po_f).shape().to_vec();
        if ss.len() != 3 || sf.len() != 3 || ss[2] != sf[1] || ss[0] != sf[0] {
            return Err(Error::dim(
                "reproject",
                format!("similarity {ss:?} against values {sf:?}"),
            ));
        }
        let v = self.wv.forward(cx, po_f);
        Ok(cx.tape.bmm(s_eg, v))
    }

    /// Two fully connected layers with the skip from the decoder pixels:
    /// `σ(W_fc2(W_fc1(PI_temp) + PI_f))`, one scalar per pixel.
    pub fn repredict<T: Scalar>(&self, cx: &mut Cx<T>, pi_temp: Var, pi_f: Var) -> Result<Var> {
        let st = cx.tape.value(pi_temp).shape().to_vec();
        let sf = cx.tape.value(pi_f).shape().to_vec();
        let projected = self.fc1.forward(cx, pi_temp);
        if cx.tape.value(projected).shape() != &sf[..] {
            return Err(Error::dim(
                "repredict",
                format!("fc1({st:?}) does not match skip {sf:?}"),
            ));
        }
        let summed = cx.tape.add(projected, pi_f);
        let logit = self.fc2.forward(cx, summed);
        Ok(cx.tape.sigmoid(logit))
    }

    /// Full refinement of one decoder block's prediction.
    ///
    /// `guide` are plain per-sample maps (already `E` or `|P−0.5|`);
    /// `k = 0` degenerates to returning `base_pred` untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn run<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        g_block: Var,
        f_block: Var,
        guides: &[ArrayD<T>],
        base_pred: Var,
        g_deep: Var,
        f_deep: Var,
        k: usize,
    ) -> Result<(Var, Vec<PixelIndexSet>)> {
        if k == 0 {
            return Ok((base_pred, Vec::new()));
        }
        let sets: Vec<PixelIndexSet> = guides
            .iter()
            .map(|g| select_top_k(g, k))
            .collect::<Result<_>>()?;
        let pi_conv_flat = gather_pixels(&mut cx.tape, g_block, &sets)?;
        let pi_f_flat = gather_pixels(&mut cx.tape, f_block, &sets)?;
        let n = sets.len();
        let c_enc = *cx.tape.value(pi_conv_flat).shape().last().unwrap();
        let pi_conv = cx.tape.reshape(pi_conv_flat, &[n, k, c_enc]);
        let pi_f = cx.tape.reshape(pi_f_flat, &[n, k, c_enc]);
        let (po_conv, po_f) = self.global_features(cx, g_deep, f_deep)?;
        let s_eg = self.edge_global_similarity(cx, pi_conv, po_conv)?;
        let pi_temp = self.reproject(cx, s_eg, po_f)?;
        let pi_pred = self.repredict(cx, pi_temp, pi_f)?;
        let refined = scatter_refine(&mut cx.tape, base_pred, pi_pred, &sets)?;
        Ok((refined, sets))
    }
}

/// Guide maps for a batched prediction/edge pair, per the configured source.
pub fn guide_maps<T: Scalar>(
    source: GuideSource,
    pred: &ArrayD<T>,
    edge: &ArrayD<T>,
) -> Vec<ArrayD<T>> {
    let src = match source {
        GuideSource::Edge => edge,
        GuideSource::AbsDiff => pred,
    };
    let n = src.shape()[0];
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let half = T::cast(0.5);
    (0..n)
        .map(|b| {
            let mut m = ArrayD::<T>::zeros(ndarray::IxDyn(&[h, w]));
            let ms = m.as_slice_mut().unwrap();
            let ss = src.as_slice().unwrap();
            for (i, v) in ms.iter_mut().enumerate() {
                let raw = ss[b * h * w + i];
                *v = match source {
                    GuideSource::Edge => raw,
                    GuideSource::AbsDiff => (raw - half).abs(),
                };
            }
            m
        })
        .collect()
}
