//! Registry of gradient checks covering every differentiable building block
//! of the model and both losses, all at 64-bit.
//!
//! Each case instantiates a tiny configuration, treats its inputs and every
//! trainable parameter as leaves, and compares analytic gradients of a
//! fixed-weight scalar projection of the output against central differences.

use crate::backbone::{BackboneConfig, Cps, PatchEmbed};
use crate::error::{Error, Result};
use crate::gradcheck::{check_scalar_fn, seeded_uniform, CheckReport};
use crate::losses::{total_loss, GroundTruthPyramid};
use crate::nn::{ConvBlock, Cx, Linear, Mode, PatchMerge, TransformerBlock, WindowAttention};
use crate::params::{Group, ParamId, ParamRegistry};
use crate::pixel_refiner::{scatter_refine, PixelIndexSet, PixelRefiner};
use crate::refine::{DecoderBlock, EncoderBlock, ModelConfig, Pipeline};
use crate::tape::Var;
use ndarray::ArrayD;
use std::sync::Arc;

/// Whether a registry entry is differentiable or selection-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Differentiable,
    /// Not differentiable by design; gradients flow only through the values
    /// gathered at the selected positions.
    SelectionOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct OpCheck {
    pub id: &'static str,
    pub threshold: f64,
    pub eps: f64,
    pub kind: CheckKind,
}

/// All registered checks, with their thresholds.
pub fn registry() -> Vec<OpCheck> {
    let op = |id, threshold, eps| OpCheck {
        id,
        threshold,
        eps,
        kind: CheckKind::Differentiable,
    };
    vec![
        op("patch_embed", 1e-4, 1e-5),
        op("window_attention", 1e-4, 1e-5),
        op("window_attention_shifted", 1e-4, 1e-5),
        op("transformer_block", 1e-4, 1e-5),
        op("patch_merge", 1e-4, 1e-5),
        op("transformer_stage", 1e-4, 1e-5),
        op("conv_block", 1e-4, 1e-5),
        op("coarse_head", 1e-4, 1e-5),
        op("encoder_block", 1e-4, 1e-5),
        op("fuse_and_embed", 1e-4, 1e-5),
        op("decoder_block", 1e-4, 1e-5),
        op("global_features", 1e-4, 1e-5),
        op("edge_global_similarity", 1e-5, 1e-5),
        op("reproject", 1e-5, 1e-5),
        op("repredict", 1e-5, 1e-5),
        op("scatter_refine", 1e-5, 1e-5),
        op("run_pr", 1e-4, 1e-5),
        op("bce_loss", 1e-6, 1e-6),
        op("iou_loss", 1e-6, 1e-6),
        OpCheck {
            id: "select_top_k",
            threshold: 0.0,
            eps: 0.0,
            kind: CheckKind::SelectionOnly,
        },
        // Whole-pipeline composite on a tiny two-scale model.
        op("end_to_end", 1e-3, 1e-5),
    ]
}

/// Run one registered check by id.
pub fn run_check(id: &str) -> Result<CheckReport> {
    let case = registry()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::contract("grad_check", format!("unregistered op `{id}`")))?;
    if case.kind == CheckKind::SelectionOnly {
        return Ok(CheckReport {
            max_rel_err: 0.0,
            coords_checked: 0,
        });
    }
    Ok(dispatch(case.id, case.eps))
}

/// Run everything; returns `(check, report)` pairs in registry order.
pub fn run_all() -> Vec<(OpCheck, CheckReport)> {
    registry()
        .into_iter()
        .map(|c| {
            let report = match c.kind {
                CheckKind::SelectionOnly => CheckReport {
                    max_rel_err: 0.0,
                    coords_checked: 0,
                },
                CheckKind::Differentiable => dispatch(c.id, c.eps),
            };
            (c, report)
        })
        .collect()
}

/// Generic layer harness: inputs plus all trainable parameters are leaves.
fn layer_case<F>(
    input_specs: &[(&[usize], f64, f64)],
    seed: u64,
    eps: f64,
    build: impl Fn(&mut ParamRegistry<f64>) -> F,
) -> CheckReport
where
    F: Fn(&mut Cx<f64>, &[Var]) -> Var,
{
    let mut reg0 = ParamRegistry::<f64>::new(seed);
    let fwd = build(&mut reg0);
    let trainable: Vec<ParamId> = reg0
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let n_in = input_specs.len();
    let mut leaves: Vec<ArrayD<f64>> = input_specs
        .iter()
        .enumerate()
        .map(|(i, (shape, lo, hi))| seeded_uniform(shape, *lo, *hi, seed + 101 + i as u64))
        .collect();
    for &pid in &trainable {
        leaves.push(reg0.value(pid).clone());
    }
    check_scalar_fn(
        &leaves,
        |ls, want| {
            let mut reg = reg0.clone();
            for (j, &pid) in trainable.iter().enumerate() {
                *reg.value_mut(pid) = ls[n_in + j].clone();
            }
            let mut cx = Cx::new(&mut reg, Mode::Train);
            let vars: Vec<Var> = ls[..n_in].iter().map(|a| cx.tape.input(a.clone())).collect();
            let out = fwd(&mut cx, &vars);
            let w = seeded_uniform(cx.tape.value(out).shape(), -1.0, 1.0, 0xC0FE);
            let s = cx.tape.weighted_sum(out, w);
            let val = cx.tape.scalar(s);
            if !want {
                return (val, vec![]);
            }
            let grads = cx.tape.backward(s);
            let mut out_grads: Vec<ArrayD<f64>> = vars
                .iter()
                .map(|&v| grads.get_or_zeros(&cx.tape, v))
                .collect();
            let touched: std::collections::HashMap<usize, Var> = cx
                .tape
                .touched_params()
                .into_iter()
                .map(|(pid, var)| (pid.0, var))
                .collect();
            for &pid in &trainable {
                out_grads.push(match touched.get(&pid.0) {
                    Some(&var) => grads.get_or_zeros(&cx.tape, var),
                    None => ArrayD::zeros(reg0.value(pid).raw_dim()),
                });
            }
            (val, out_grads)
        },
        eps,
        60,
        seed,
    )
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 8,
        patch_size: 4,
        window_size: 2,
        depths: [1, 1, 1, 1],
        heads: [1, 1, 1, 1],
        input_side: 32,
    }
}

fn dispatch(id: &str, eps: f64) -> CheckReport {
    match id {
        "patch_embed" => layer_case(&[(&[1, 8, 8, 3], -1.0, 1.0)], 11, eps, |reg| {
            let pe = PatchEmbed::new(reg, "t.embed", 4, 3, 8, Group::Backbone);
            move |cx: &mut Cx<f64>, v: &[Var]| pe.forward(cx, v[0]).unwrap()
        }),
        "window_attention" => layer_case(&[(&[1, 4, 4, 8], -1.0, 1.0)], 12, eps, |reg| {
            let attn = WindowAttention::new(reg, "t.attn", 8, 2, 2, Group::Backbone);
            move |cx: &mut Cx<f64>, v: &[Var]| attn.forward(cx, v[0], false)
        }),
        "window_attention_shifted" => layer_case(&[(&[1, 4, 4, 8], -1.0, 1.0)], 13, eps, |reg| {
            let attn = WindowAttention::new(reg, "t.attn", 8, 2, 2, Group::Backbone);
            move |cx: &mut Cx<f64>, v: &[Var]| attn.forward(cx, v[0], true)
        }),
        "transformer_block" => layer_case(&[(&[1, 4, 4, 8], -1.0, 1.0)], 14, eps, |reg| {
            let blk = TransformerBlock::new(reg, "t.blk", 8, 2, 2, true, Group::Backbone);
            move |cx: &mut Cx<f64>, v: &[Var]| blk.forward(cx, v[0])
        }),
        "patch_merge" => layer_case(&[(&[1, 4, 4, 4], -1.0, 1.0)], 15, eps, |reg| {
            let pm = PatchMerge::new(reg, "t.merge", 4, Group::Backbone);
            move |cx: &mut Cx<f64>, v: &[Var]| pm.forward(cx, v[0])
        }),
        "transformer_stage" => layer_case(&[(&[1, 8, 8, 8], -1.0, 1.0)], 16, eps, |reg| {
            let cps = Cps::new(reg, &tiny_backbone()).unwrap();
            move |cx: &mut Cx<f64>, v: &[Var]| cps.transformer_stage(cx, v[0], 2).unwrap()
        }),
        "conv_block" => layer_case(&[(&[2, 5, 5, 3], -1.0, 1.0)], 17, eps, |reg| {
            let cb = ConvBlock::new(reg, "t.cb", 3, 4, 1, Group::Other);
            move |cx: &mut Cx<f64>, v: &[Var]| cb.forward(cx, v[0])
        }),
        "coarse_head" => layer_case(
            &[
                (&[1, 8, 8, 8], -1.0, 1.0),
                (&[1, 4, 4, 16], -1.0, 1.0),
                (&[1, 2, 2, 32], -1.0, 1.0),
                (&[1, 1, 1, 64], -1.0, 1.0),
            ],
            18,
            eps,
            |reg| {
                let cps = Cps::new(reg, &tiny_backbone()).unwrap();
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    let (_fused, pred, edge) = cps.coarse_head(cx, v).unwrap();
                    let p = cx.tape.reshape(pred, &[1024, 1]);
                    let e = cx.tape.reshape(edge, &[1024, 1]);
                    cx.tape.concat_last(&[p, e])
                }
            },
        ),
        "encoder_block" => layer_case(
            &[(&[1, 8, 8, 6], -1.0, 1.0), (&[1, 16, 16, 3], 0.0, 1.0)],
            19,
            eps,
            |reg| {
                let eb = EncoderBlock::new(reg, "t.eb", 6);
                move |cx: &mut Cx<f64>, v: &[Var]| eb.forward_projected(cx, v[0], v[1]).unwrap()
            },
        ),
        "fuse_and_embed" => layer_case(
            &[(&[1, 8, 8, 3], 0.0, 1.0), (&[1, 8, 8, 5], -1.0, 1.0)],
            20,
            eps,
            |reg| {
                let pe = PatchEmbed::new(reg, "t.fuse", 4, 8, 8, Group::Other);
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    let cat = cx.tape.concat_last(&[v[0], v[1]]);
                    pe.forward(cx, cat).unwrap()
                }
            },
        ),
        "decoder_block" => layer_case(
            &[
                (&[1, 4, 4, 5], -1.0, 1.0),
                (&[1, 4, 4, 6], -1.0, 1.0),
                (&[1, 4, 4, 1], 0.05, 0.95),
                (&[1, 4, 4, 1], 0.05, 0.95),
            ],
            21,
            eps,
            |reg| {
                let db = DecoderBlock::new(reg, "t.db", 5, 6);
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    let (f, p, e) = db.forward_from_raw(cx, v[0], v[1], v[2], v[3]).unwrap();
                    let shape = cx.tape.value(f).shape().to_vec();
                    let rows: usize = shape.iter().take(3).product();
                    let fr = cx.tape.reshape(f, &[rows, shape[3]]);
                    let pr = cx.tape.reshape(p, &[rows, 1]);
                    let er = cx.tape.reshape(e, &[rows, 1]);
                    cx.tape.concat_last(&[fr, pr, er])
                }
            },
        ),
        "global_features" => layer_case(
            &[(&[1, 8, 8, 6], -1.0, 1.0), (&[1, 8, 8, 2], -1.0, 1.0)],
            22,
            eps,
            |reg| {
                let pr = PixelRefiner::new(reg, "t.pr", 6, 2, 4, Group::Other);
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    let (a, b) = pr.global_features(cx, v[0], v[1]).unwrap();
                    cx.tape.concat_last(&[a, b])
                }
            },
        ),
        "edge_global_similarity" => layer_case(
            &[(&[1, 5, 6], -1.0, 1.0), (&[1, 4, 4], -1.0, 1.0)],
            23,
            eps,
            |reg| {
                let pr = PixelRefiner::new(reg, "t.pr", 6, 2, 4, Group::Other);
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    pr.edge_global_similarity(cx, v[0], v[1]).unwrap()
                }
            },
        ),
        "reproject" => layer_case(
            &[(&[1, 5, 4], 0.05, 0.95), (&[1, 4, 4], -1.0, 1.0)],
            24,
            eps,
            |reg| {
                let pr = PixelRefiner::new(reg, "t.pr", 6, 2, 4, Group::Other);
                move |cx: &mut Cx<f64>, v: &[Var]| pr.reproject(cx, v[0], v[1]).unwrap()
            },
        ),
        "repredict" => layer_case(
            &[(&[1, 5, 4], -1.0, 1.0), (&[1, 5, 6], -1.0, 1.0)],
            25,
            eps,
            |reg| {
                let pr = PixelRefiner::new(reg, "t.pr", 6, 2, 4, Group::Other);
                move |cx: &mut Cx<f64>, v: &[Var]| pr.repredict(cx, v[0], v[1]).unwrap()
            },
        ),
        "scatter_refine" => layer_case(
            &[(&[1, 4, 4, 1], 0.05, 0.95), (&[3, 1], 0.05, 0.95)],
            26,
            eps,
            |_reg| {
                let sets = vec![PixelIndexSet {
                    indices: vec![2, 7, 11],
                    shape: (4, 4),
                }];
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    scatter_refine(&mut cx.tape, v[0], v[1], &sets).unwrap()
                }
            },
        ),
        "run_pr" => layer_case(
            &[
                (&[1, 8, 8, 6], -1.0, 1.0),
                (&[1, 8, 8, 6], -1.0, 1.0),
                (&[1, 8, 8, 1], 0.05, 0.95),
                (&[1, 8, 8, 6], -1.0, 1.0),
                (&[1, 8, 8, 2], -1.0, 1.0),
            ],
            27,
            eps,
            |reg| {
                let pr = PixelRefiner::new(reg, "t.pr", 6, 2, 4, Group::Other);
                // Fixed guide so the selection cannot flip between probes.
                let guides = vec![seeded_uniform(&[8, 8], 0.0, 1.0, 4242)];
                move |cx: &mut Cx<f64>, v: &[Var]| {
                    let (refined, _) = pr
                        .run(cx, v[0], v[1], &guides, v[2], v[3], v[4], 7)
                        .unwrap();
                    refined
                }
            },
        ),
        "bce_loss" => layer_case(&[(&[3, 4], 0.05, 0.95)], 28, eps, |_reg| {
            let target = Arc::new(
                seeded_uniform(&[3, 4], 0.0, 1.0, 777).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }),
            );
            move |cx: &mut Cx<f64>, v: &[Var]| cx.tape.bce_loss(v[0], target.clone())
        }),
        "iou_loss" => layer_case(&[(&[3, 4], 0.05, 0.95)], 29, eps, |_reg| {
            let target = Arc::new(
                seeded_uniform(&[3, 4], 0.0, 1.0, 778).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }),
            );
            move |cx: &mut Cx<f64>, v: &[Var]| cx.tape.iou_loss(v[0], target.clone())
        }),
        "end_to_end" => end_to_end_case(eps),
        other => panic!("unregistered gradient check `{other}`"),
    }
}

/// Tiny full-pipeline composite: forward, deep supervision, total loss.
fn end_to_end_case(eps: f64) -> CheckReport {
    let cfg = ModelConfig {
        backbone: tiny_backbone(),
        scales: vec![32, 64],
        stage_enabled: vec![true],
        encoder_channels: 8,
        pr_scales: vec![],
        pr_k: None,
        pr_guide: crate::pixel_refiner::GuideSource::Edge,
    };
    let mut reg0 = ParamRegistry::<f64>::new(31);
    let pipeline = Pipeline::new(&mut reg0, &cfg).unwrap();
    let trainable: Vec<ParamId> = reg0
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let mask = seeded_uniform(&[1, 64, 64, 1], 0.0, 1.0, 555)
        .mapv(|v| if v > 0.6 { 1.0 } else { 0.0 });
    let gt = GroundTruthPyramid::new(&mask, &cfg.scales, 2).unwrap();
    let img_lo = seeded_uniform(&[1, 32, 32, 3], 0.0, 1.0, 556);
    let img_hi = seeded_uniform(&[1, 64, 64, 3], 0.0, 1.0, 557);
    let mut leaves: Vec<ArrayD<f64>> = vec![img_lo, img_hi];
    for &pid in &trainable {
        leaves.push(reg0.value(pid).clone());
    }
    check_scalar_fn(
        &leaves,
        |ls, want| {
            let mut reg = reg0.clone();
            for (j, &pid) in trainable.iter().enumerate() {
                *reg.value_mut(pid) = ls[2 + j].clone();
            }
            let mut cx = Cx::new(&mut reg, Mode::Train);
            let lo = cx.tape.input(ls[0].clone());
            let hi = cx.tape.input(ls[1].clone());
            let out = pipeline.forward(&mut cx, &[lo, hi]).unwrap();
            let (loss, _) = total_loss(&mut cx, &out, &gt, &[1.0, 1.0], true).unwrap();
            let val = cx.tape.scalar(loss);
            if !want {
                return (val, vec![]);
            }
            let grads = cx.tape.backward(loss);
            let mut out_grads = vec![
                grads.get_or_zeros(&cx.tape, lo),
                grads.get_or_zeros(&cx.tape, hi),
            ];
            let touched: std::collections::HashMap<usize, Var> = cx
                .tape
                .touched_params()
                .into_iter()
                .map(|(pid, var)| (pid.0, var))
                .collect();
            for &pid in &trainable {
                out_grads.push(match touched.get(&pid.0) {
                    Some(&var) => grads.get_or_zeros(&cx.tape, var),
                    None => ArrayD::zeros(reg0.value(pid).raw_dim()),
                });
            }
            (val, out_grads)
        },
        eps,
        80,
        31,
    )
}
