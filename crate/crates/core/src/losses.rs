//! Supervision: pixel losses, edge ground truth synthesis, per-stage deep
//! supervision and the weighted total.

use crate::error::{Error, Result};
use crate::nn::Cx;
use crate::refine::{PipelineOut, StageOut};
use crate::scalar::Scalar;
use crate::tape::{resize_nearest_array, Var};
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Default band half-width of synthesized edge ground truth, in pixels at
/// each supervised resolution.
pub const EDGE_WIDTH: usize = 2;

/// Binary 3×3 dilation (`width` passes); the outside of the frame counts as
/// background.
fn dilate(mask: &[u8], h: usize, w: usize, width: usize) -> Vec<u8> {
    let mut cur = mask.to_vec();
    for _ in 0..width {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if cur[y * w + x] == 1 {
                    continue;
                }
                'probe: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0
                            && ny < h as i64
                            && nx >= 0
                            && nx < w as i64
                            && cur[ny as usize * w + nx as usize] == 1
                        {
                            next[y * w + x] = 1;
                            break 'probe;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

fn erode(mask: &[u8], h: usize, w: usize, width: usize) -> Vec<u8> {
    let mut cur = mask.to_vec();
    for _ in 0..width {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if cur[y * w + x] == 0 {
                    continue;
                }
                'probe: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            next[y * w + x] = 0;
                            break 'probe;
                        }
                        if cur[ny as usize * w + nx as usize] == 0 {
                            next[y * w + x] = 0;
                            break 'probe;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

pub(crate) fn to_binary<T: Scalar>(mask: &ArrayD<T>, op: &'static str) -> Result<Vec<u8>> {
    mask.iter()
        .map(|&v| {
            if v == T::zero() {
                Ok(0u8)
            } else if v == T::one() {
                Ok(1u8)
            } else {
                Err(Error::contract(op, format!("mask value {v} is not binary")))
            }
        })
        .collect()
}

/// Morphological gradient of a strictly binary mask: `dilate(width) − erode(width)`.
pub fn edge_ground_truth<T: Scalar>(mask: &ArrayD<T>, width: usize) -> Result<ArrayD<T>> {
    if width < 1 {
        return Err(Error::contract("edge_ground_truth", "width must be >= 1"));
    }
    let s = mask.shape().to_vec();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[2] == 1 => (s[0], s[1]),
        _ => {
            return Err(Error::dim(
                "edge_ground_truth",
                format!("mask must be [h,w] or [h,w,1], got {s:?}"),
            ))
        }
    };
    let bin = to_binary(mask, "edge_ground_truth")?;
    let d = dilate(&bin, h, w, width);
    let e = erode(&bin, h, w, width);
    let edge: Vec<T> = d
        .iter()
        .zip(e.iter())
        .map(|(&dv, &ev)| if dv > ev { T::one() } else { T::zero() })
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&s), edge).unwrap())
}

/// Batched variant over `[n,h,w,1]`.
pub fn edge_ground_truth_batch<T: Scalar>(masks: &ArrayD<T>, width: usize) -> Result<ArrayD<T>> {
    let s = masks.shape().to_vec();
    assert_eq!(s.len(), 4);
    let (n, h, w) = (s[0], s[1], s[2]);
    let mut out = ArrayD::<T>::zeros(IxDyn(&s));
    for b in 0..n {
        let one = masks
            .index_axis(ndarray::Axis(0), b)
            .to_owned()
            .into_dyn();
        let edge = edge_ground_truth(&one, width)?;
        out.index_axis_mut(ndarray::Axis(0), b).assign(&edge);
    }
    Ok(out)
}

/// One supervised output's losses.
#[derive(Clone, Debug)]
pub struct TermReport {
    pub name: String,
    pub bce: f64,
    pub iou: f64,
}

/// Sum over a stage's supervised outputs.
#[derive(Clone, Debug, Default)]
pub struct StageLossReport {
    pub terms: Vec<TermReport>,
    pub total: f64,
}

/// The full per-step loss breakdown.
#[derive(Clone, Debug)]
pub struct LossReport {
    /// (stage name, report); absent stages carry an empty report.
    pub stages: Vec<(String, StageLossReport)>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite term, scanning stage order.
    pub fn first_non_finite(&self) -> Option<String> {
        for (stage, rep) in &self.stages {
            for t in &rep.terms {
                if !t.bce.is_finite() {
                    return Some(format!("{stage}.{}.bce", t.name));
                }
                if !t.iou.is_finite() {
                    return Some(format!("{stage}.{}.iou", t.name));
                }
            }
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }

    pub fn stage_total(&self, name: &str) -> f64 {
        self.stages
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.total)
            .unwrap_or(0.0)
    }
}

/// Per-resolution ground truth: nearest-resized mask plus a freshly
/// synthesized edge band at that resolution.
pub struct GroundTruthPyramid<T: Scalar> {
    levels: Vec<(usize, Arc<ArrayD<T>>, Arc<ArrayD<T>>)>,
}

impl<T: Scalar> GroundTruthPyramid<T> {
    /// `mask_hr`: `[n,H,W,1]` strictly binary at the highest resolution.
    pub fn new(mask_hr: &ArrayD<T>, resolutions: &[usize], edge_width: usize) -> Result<Self> {
        to_binary(mask_hr, "stage_loss")?;
        let mut levels = Vec::new();
        for &r in resolutions {
            let mask = resize_nearest_array(mask_hr, r, r);
            let edge = edge_ground_truth_batch(&mask, edge_width)?;
            levels.push((r, Arc::new(mask), Arc::new(edge)));
        }
        Ok(GroundTruthPyramid { levels })
    }

    pub fn mask(&self, resolution: usize) -> Result<Arc<ArrayD<T>>> {
        self.levels
            .iter()
            .find(|(r, _, _)| *r == resolution)
            .map(|(_, m, _)| m.clone())
            .ok_or_else(|| {
                Error::contract("stage_loss", format!("no ground truth at {resolution}"))
            })
    }

    pub fn edge(&self, resolution: usize) -> Result<Arc<ArrayD<T>>> {
        self.levels
            .iter()
            .find(|(r, _, _)| *r == resolution)
            .map(|(_, _, e)| e.clone())
            .ok_or_else(|| {
                Error::contract("stage_loss", format!("no ground truth at {resolution}"))
            })
    }
}

/// `BCE + IoU` of one output against one target; returns the node and the
/// report entry.
fn supervised_term<T: Scalar>(
    cx: &mut Cx<T>,
    name: &str,
    output: Var,
    target: Arc<ArrayD<T>>,
) -> (Var, TermReport) {
    let bce = cx.tape.bce_loss(output, target.clone());
    let iou = cx.tape.iou_loss(output, target);
    let sum = cx.tape.linear_combination(&[(T::one(), bce), (T::one(), iou)]);
    let report = TermReport {
        name: name.to_string(),
        bce: cx.tape.scalar(bce).to_f64(),
        iou: cx.tape.scalar(iou).to_f64(),
    };
    (sum, report)
}

/// Deep supervision of the coarse stage (its two maps at the coarse side).
pub fn coarse_stage_loss<T: Scalar>(
    cx: &mut Cx<T>,
    pred: Var,
    edge: Var,
    gt: &GroundTruthPyramid<T>,
) -> Result<(Var, StageLossReport)> {
    let res = cx.tape.value(pred).shape()[1];
    let mut nodes = Vec::new();
    let mut report = StageLossReport::default();
    let (n, t) = supervised_term(cx, "pred", pred, gt.mask(res)?);
    nodes.push((T::one(), n));
    report.terms.push(t);
    let (n, t) = supervised_term(cx, "edge", edge, gt.edge(res)?);
    nodes.push((T::one(), n));
    report.terms.push(t);
    let total = cx.tape.linear_combination(&nodes);
    report.total = report.terms.iter().map(|t| t.bce + t.iou).sum();
    Ok((total, report))
}

/// Deep supervision of one refinement stage: every block's saliency and edge
/// maps, plus refined maps where a refiner ran.
pub fn refine_stage_loss<T: Scalar>(
    cx: &mut Cx<T>,
    out: &StageOut,
    gt: &GroundTruthPyramid<T>,
    supervise_refined: bool,
) -> Result<(Var, StageLossReport)> {
    if out.blocks.is_empty() {
        return Err(Error::contract("stage_loss", "stage emitted no blocks"));
    }
    let mut nodes = Vec::new();
    let mut report = StageLossReport::default();
    for (bi, block) in out.blocks.iter().enumerate() {
        let mask = gt.mask(block.resolution)?;
        let edge = gt.edge(block.resolution)?;
        let (n, t) = supervised_term(cx, &format!("block{bi}.pred"), block.pred, mask.clone());
        nodes.push((T::one(), n));
        report.terms.push(t);
        let (n, t) = supervised_term(cx, &format!("block{bi}.edge"), block.edge, edge);
        nodes.push((T::one(), n));
        report.terms.push(t);
        if supervise_refined {
            if let Some(refined) = block.refined {
                let (n, t) =
                    supervised_term(cx, &format!("block{bi}.refined"), refined, mask);
                nodes.push((T::one(), n));
                report.terms.push(t);
            }
        }
    }
    let total = cx.tape.linear_combination(&nodes);
    report.total = report.terms.iter().map(|t| t.bce + t.iou).sum();
    Ok((total, report))
}

/// Weighted total over the pipeline stages.
///
/// `weights` align with `[coarse, refine1, refine2, ...]`; disabled stages
/// contribute nothing. Returns the loss node for the optimizer and the f64
/// report for logging and checks.
pub fn total_loss<T: Scalar>(
    cx: &mut Cx<T>,
    out: &PipelineOut,
    gt: &GroundTruthPyramid<T>,
    weights: &[f64],
    supervise_refined: bool,
) -> Result<(Var, LossReport)> {
    let n_stages = 1 + out.stage_outs.len();
    if weights.len() != n_stages {
        return Err(Error::Config(format!(
            "{} loss weights for {n_stages} stages",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::Config(format!(
            "stage weights must be finite and non-negative, got {weights:?}"
        )));
    }
    let mut terms = Vec::new();
    let mut stages = Vec::new();
    let (node, rep) = coarse_stage_loss(cx, out.coarse.pred, out.coarse.edge, gt)?;
    terms.push((T::cast(weights[0]), node));
    stages.push(("cps".to_string(), rep));
    for (i, stage) in out.stage_outs.iter().enumerate() {
        let name = format!("rrs{}", i + 1);
        match stage {
            Some(s) => {
                let (node, rep) = refine_stage_loss(cx, s, gt, supervise_refined)?;
                terms.push((T::cast(weights[i + 1]), node));
                stages.push((name, rep));
            }
            None => stages.push((name, StageLossReport::default())),
        }
    }
    let total_node = cx.tape.linear_combination(&terms);
    let total: f64 = stages
        .iter()
        .zip(weights.iter())
        .map(|((_, r), &w)| w * r.total)
        .sum();
    Ok((
        total_node,
        LossReport {
            stages,
            weights: weights.to_vec(),
            total,
        },
    ))
}
