//! Coarse prediction stage: patch embedding, a four-stage hierarchical
//! windowed-attention backbone, and the head producing the coarse saliency
//! and edge maps.

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Cx, Linear, PatchMerge, TransformerBlock};
use crate::params::{Group, ParamRegistry};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::windows;
use std::sync::Arc;

/// Static shape and size choices of the coarse backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Embedding channels `C`; stages run at `C, 2C, 4C, 8C`.
    pub embed_dim: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    /// Tokens per attention window side.
    pub window_size: usize,
    /// Transformer blocks per stage.
    pub depths: [usize; 4],
    /// Attention heads per stage.
    pub heads: [usize; 4],
    /// Square input side of the coarse stage.
    pub input_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            patch_size: 4,
            window_size: 4,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            input_side: 64,
        }
    }
}

impl BackboneConfig {
    pub fn stage_channels(&self, stage_idx: usize) -> usize {
        assert!((1..=4).contains(&stage_idx));
        self.embed_dim << (stage_idx - 1)
    }

    /// Token grid side entering the given stage (after merging for `i ≥ 2`).
    pub fn stage_side(&self, stage_idx: usize) -> usize {
        (self.input_side / self.patch_size) >> (stage_idx - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 1 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.input_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input side {} not divisible by patch size {}",
                self.input_side, self.patch_size
            )));
        }
        if self.embed_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 8 for the head shrink",
                self.embed_dim
            )));
        }
        for i in 1..=4 {
            let side = self.stage_side(i);
            if side == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: token grid collapsed to zero"
                )));
            }
            let ws = self.window_size.min(side);
            if side % ws != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: grid side {side} not divisible by window {ws}"
                )));
            }
            if i >= 2 && self.stage_side(i - 1) % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: previous grid side {} is odd, cannot merge",
                    self.stage_side(i - 1)
                )));
            }
            if self.stage_channels(i) % self.heads[i - 1] != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {} heads do not divide {} channels",
                    self.heads[i - 1],
                    self.stage_channels(i)
                )));
            }
        }
        Ok(())
    }
}

/// Per-patch flatten-and-affine embedding.
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub c_in: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        patch: usize,
        c_in: usize,
        c_out: usize,
        group: Group,
    ) -> Self {
        let proj = Linear::new(reg, name, patch * patch * c_in, c_out, true, group);
        PatchEmbed { proj, patch, c_in }
    }

    /// `[n,h,w,c_in]` to `[n, h/p, w/p, c_out]`. Patch rows are flattened in
    /// (dy, dx, channel) order before the affine map.
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, image: Var) -> Result<Var> {
        let shape = cx.tape.value(image).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if c != self.c_in {
            return Err(Error::dim(
                "patch_embed",
                format!("expected {} input channels, got {c}", self.c_in),
            ));
        }
        let p = self.patch;
        if h % p != 0 {
            return Err(Error::dim(
                "patch_embed",
                format!("height {h} not divisible by patch size {p}"),
            ));
        }
        if w % p != 0 {
            return Err(Error::dim(
                "patch_embed",
                format!("width {w} not divisible by patch size {p}"),
            ));
        }
        let map = Arc::new(windows::patch_map(n, h, w, p));
        let patches = cx
            .tape
            .gather_rows(image, &[n, h / p, w / p, p * p, c], map);
        let patches = cx.tape.reshape(patches, &[n, h / p, w / p, p * p * c]);
        Ok(self.proj.forward(cx, patches))
    }
}

pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<TransformerBlock>,
}

pub struct CoarseHead {
    pub reduce: Vec<ConvBlock>,
    pub fuse: ConvBlock,
    pub shrink: ConvBlock,
    pub pred_proj: Linear,
    pub edge_proj: Linear,
}

/// The shared coarse stage. One instance serves the standalone coarse pass
/// and both refinement stages (recurrent parameter sharing).
pub struct Cps {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub head: CoarseHead,
}

/// Everything one coarse pass produces.
pub struct CpsOut {
    /// Stage pyramid at strides 4, 8, 16, 32.
    pub pyramid: Vec<Var>,
    /// Fused head feature at full coarse resolution (`C/8` channels).
    pub fused: Var,
    /// Coarse saliency map in [0,1], `[n, side, side, 1]`.
    pub pred: Var,
    /// Coarse edge map in [0,1], `[n, side, side, 1]`.
    pub edge: Var,
}

impl Cps {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let g = Group::Backbone;
        let embed = PatchEmbed::new(reg, "cps.embed", cfg.patch_size, 3, cfg.embed_dim, g);
        let mut stages = Vec::with_capacity(4);
        for i in 1..=4 {
            let dim = cfg.stage_channels(i);
            let merge = (i >= 2).then(|| {
                PatchMerge::new(reg, &format!("cps.stage{i}.merge"), cfg.stage_channels(i - 1), g)
            });
            let blocks = (0..cfg.depths[i - 1])
                .map(|bi| {
                    TransformerBlock::new(
                        reg,
                        &format!("cps.stage{i}.block{bi}"),
                        dim,
                        cfg.heads[i - 1],
                        cfg.window_size,
                        bi % 2 == 1,
                        g,
                    )
                })
                .collect();
            stages.push(Stage { merge, blocks });
        }
        let c = cfg.embed_dim;
        let reduce = (1..=4)
            .map(|i| {
                ConvBlock::new(
                    reg,
                    &format!("cps.head.reduce{i}"),
                    cfg.stage_channels(i),
                    c,
                    1,
                    g,
                )
            })
            .collect();
        let fuse = ConvBlock::new(reg, "cps.head.fuse", 4 * c, 4 * c, 1, g);
        let shrink = ConvBlock::new(reg, "cps.head.shrink", 4 * c, c / 8, 1, g);
        let pred_proj = Linear::new(reg, "cps.head.pred", c / 8, 1, true, g);
        let edge_proj = Linear::new(reg, "cps.head.edge", c / 8, 1, true, g);
        Ok(Cps {
            cfg: cfg.clone(),
            embed,
            stages,
            head: CoarseHead {
                reduce,
                fuse,
                shrink,
                pred_proj,
                edge_proj,
            },
        })
    }

    /// Patch embedding of a coarse input image.
    pub fn patch_embed<T: Scalar>(&self, cx: &mut Cx<T>, image: Var) -> Result<Var> {
        self.embed.forward(cx, image)
    }

    /// One backbone stage (`stage_idx` in 1..=4): patch merging for stages
    /// two and up, then the stage's transformer blocks.
    pub fn transformer_stage<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        x: Var,
        stage_idx: usize,
    ) -> Result<Var> {
        if !(1..=4).contains(&stage_idx) {
            return Err(Error::contract(
                "transformer_stage",
                format!("stage index {stage_idx} outside 1..=4"),
            ));
        }
        let stage = &self.stages[stage_idx - 1];
        let mut cur = x;
        if let Some(merge) = &stage.merge {
            let s = cx.tape.value(cur).shape().to_vec();
            if s[1] % 2 != 0 || s[2] % 2 != 0 {
                return Err(Error::dim(
                    "transformer_stage",
                    format!("stage {stage_idx}: odd grid {}x{} cannot merge", s[1], s[2]),
                ));
            }
            cur = merge.forward(cx, cur);
        }
        let s = cx.tape.value(cur).shape().to_vec();
        let ws = self.cfg.window_size.min(s[1]).min(s[2]);
        if s[1] % ws != 0 || s[2] % ws != 0 {
            return Err(Error::dim(
                "transformer_stage",
                format!(
                    "stage {stage_idx}: grid {}x{} not divisible by window {ws}",
                    s[1], s[2]
                ),
            ));
        }
        for block in &stage.blocks {
            cur = block.forward(cx, cur);
        }
        Ok(cur)
    }

    /// Coarse head over the stage pyramid: reduce each level to `C`, upsample
    /// to the stride-4 grid, fuse, upsample 4×, shrink to `C/8`, project.
    pub fn coarse_head<T: Scalar>(&self, cx: &mut Cx<T>, pyramid: &[Var]) -> Result<(Var, Var, Var)> {
        if pyramid.len() != 4 {
            return Err(Error::dim(
                "coarse_head",
                format!("expected 4 pyramid levels, got {}", pyramid.len()),
            ));
        }
        let grid = self.cfg.stage_side(1);
        for (i, &level) in pyramid.iter().enumerate() {
            let s = cx.tape.value(level).shape().to_vec();
            let want_side = self.cfg.stage_side(i + 1);
            let want_c = self.cfg.stage_channels(i + 1);
            if s[1] != want_side || s[2] != want_side || s[3] != want_c {
                return Err(Error::dim(
                    "coarse_head",
                    format!(
                        "level {}: got {}x{}x{}, want {want_side}x{want_side}x{want_c}",
                        i + 1,
                        s[1],
                        s[2],
                        s[3]
                    ),
                ));
            }
        }
        let mut reduced = Vec::with_capacity(4);
        for (i, &level) in pyramid.iter().enumerate() {
            let r = self.head.reduce[i].forward(cx, level);
            let r = cx.tape.resize_bilinear(r, grid, grid);
            reduced.push(r);
        }
        let cat = cx.tape.concat_last(&reduced);
        let fused_s4 = self.head.fuse.forward(cx, cat);
        let side = self.cfg.input_side;
        let up = cx.tape.resize_bilinear(fused_s4, side, side);
        let fused = self.head.shrink.forward(cx, up);
        let pred_logit = self.head.pred_proj.forward(cx, fused);
        let edge_logit = self.head.edge_proj.forward(cx, fused);
        let pred = cx.tape.sigmoid(pred_logit);
        let edge = cx.tape.sigmoid(edge_logit);
        Ok((fused, pred, edge))
    }

    /// Full coarse pass. When `injected_tokens` is given it bypasses the
    /// stage-one patch embedding (the refinement stages inject their fused
    /// embeddings here); the backbone and head parameters are identical
    /// either way.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        image_lr: Option<Var>,
        injected_tokens: Option<Var>,
    ) -> Result<CpsOut> {
        let tokens = match (injected_tokens, image_lr) {
            (Some(t), _) => {
                let s = cx.tape.value(t).shape().to_vec();
                let grid = self.cfg.stage_side(1);
                if s.len() != 4 || s[1] != grid || s[2] != grid || s[3] != self.cfg.embed_dim {
                    return Err(Error::dim(
                        "run_cps",
                        format!(
                            "injected token grid {s:?} does not match [n,{grid},{grid},{}]",
                            self.cfg.embed_dim
                        ),
                    ));
                }
                t
            }
            (None, Some(img)) => {
                let s = cx.tape.value(img).shape().to_vec();
                if s[1] != self.cfg.input_side || s[2] != self.cfg.input_side {
                    return Err(Error::dim(
                        "run_cps",
                        format!(
                            "coarse input {}x{} does not match configured side {}",
                            s[1], s[2], self.cfg.input_side
                        ),
                    ));
                }
                self.patch_embed(cx, img)?
            }
            (None, None) => {
                return Err(Error::contract(
                    "run_cps",
                    "neither an image nor injected tokens were provided",
                ))
            }
        };
        let mut pyramid = Vec::with_capacity(4);
        let mut cur = tokens;
        for i in 1..=4 {
            cur = self.transformer_stage(cx, cur, i)?;
            pyramid.push(cur);
        }
        let (fused, pred, edge) = self.coarse_head(cx, &pyramid)?;
        Ok(CpsOut {
            pyramid,
            fused,
            pred,
            edge,
        })
    }
}
