//! Recurrent refinement stages and the full coarse-to-fine pipeline.
//!
//! Each refinement stage has an image-guided encoder, re-runs the shared
//! coarse backbone on embeddings fused with its deepest encoder feature, and
//! decodes back up under two guidance signals: the previous stage's
//! prediction (inter-stage) and a running edge estimate (inner-stage).

use crate::backbone::{BackboneConfig, Cps, CpsOut, PatchEmbed};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Cx, Linear};
use crate::params::{Group, ParamId, ParamRegistry};
use crate::pixel_refiner::{default_k, guide_maps, GuideSource, PixelIndexSet, PixelRefiner};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Model-level configuration: the scale chain plus refinement options.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Doubling chain of square input sides; the first entry is the coarse
    /// side, each later entry is one refinement stage.
    pub scales: Vec<usize>,
    /// Which refinement stages actually run (aligned with `scales[1..]`).
    pub stage_enabled: Vec<bool>,
    /// Encoder channel width.
    pub encoder_channels: usize,
    /// Decoder-block output resolutions that get a pixel refiner.
    pub pr_scales: Vec<usize>,
    /// Selected pixels per refinement; `None` picks `4·side`.
    pub pr_k: Option<usize>,
    pub pr_guide: GuideSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            scales: vec![64, 128, 256],
            stage_enabled: vec![true, true],
            encoder_channels: 32,
            pr_scales: vec![128, 256],
            pr_k: None,
            pr_guide: GuideSource::Edge,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.scales.is_empty() {
            return Err(Error::Config("empty scale chain".into()));
        }
        if self.scales[0] != self.backbone.input_side {
            return Err(Error::Config(format!(
                "scale chain starts at {} but the coarse side is {}",
                self.scales[0], self.backbone.input_side
            )));
        }
        for pair in self.scales.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::Config(format!(
                    "scale chain must double at every step: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.stage_enabled.len() != self.scales.len() - 1 {
            return Err(Error::Config(format!(
                "{} stage flags for {} refinement scales",
                self.stage_enabled.len(),
                self.scales.len() - 1
            )));
        }
        for &s in &self.pr_scales {
            if !self.scales.contains(&s) {
                return Err(Error::Config(format!(
                    "pixel refiner scale {s} not in the scale chain {:?}",
                    self.scales
                )));
            }
        }
        if self.backbone.input_side % 8 != 0 {
            return Err(Error::Config(
                "coarse side must be divisible by 8 for the refiner reductions".into(),
            ));
        }
        Ok(())
    }

    /// Blocks of the refinement stage at `resolution` (coarse side up to the
    /// stage side, doubling).
    pub fn n_blocks(&self, resolution: usize) -> usize {
        (resolution / self.scales[0]).trailing_zeros() as usize + 1
    }
}

/// Encoder block: conv block on the previous feature, concatenation with the
/// resized input image, then a projection back to the encoder width.
pub struct EncoderBlock {
    pub cb: ConvBlock,
    pub proj: Linear,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c_g: usize) -> Self {
        EncoderBlock {
            cb: ConvBlock::new(reg, &format!("{name}.cb"), c_g, c_g, 1, Group::Other),
            proj: Linear::new(reg, &format!("{name}.proj"), c_g + 3, c_g, true, Group::Other),
        }
    }

    /// The raw block output: `[conv_block(prev), resize(image)]` with
    /// `c_g + 3` channels.
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, prev: Var, image_hr: Var) -> Result<Var> {
        let conv = self.cb.forward(cx, prev);
        let s = cx.tape.value(conv).shape().to_vec();
        let img = cx.tape.resize_bilinear(image_hr, s[1], s[2]);
        let si = cx.tape.value(img).shape().to_vec();
        if si[0] != s[0] || si[1] != s[1] || si[2] != s[2] {
            return Err(Error::dim(
                "encoder_block",
                format!("resized image {si:?} does not match feature {s:?}"),
            ));
        }
        Ok(cx.tape.concat_last(&[conv, img]))
    }

    /// Block output projected back to the encoder width.
    pub fn forward_projected<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        prev: Var,
        image_hr: Var,
    ) -> Result<Var> {
        let cat = self.forward(cx, prev, image_hr)?;
        Ok(self.proj.forward(cx, cat))
    }
}

/// Image-guided encoder: a seed projection then a halving chain of blocks,
/// every one re-concatenating the resized input image.
pub struct ImageGuidedEncoder {
    pub seed_w: ParamId,
    pub seed_b: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl ImageGuidedEncoder {
    fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c_g: usize, n_blocks: usize) -> Self {
        let seed_w = reg.trunc_normal(format!("{name}.seed.w"), &[3, 3, 3, c_g], Group::Other);
        let seed_b = reg.zeros(format!("{name}.seed.b"), &[c_g], Group::Other);
        let blocks = (0..n_blocks)
            .map(|i| EncoderBlock::new(reg, &format!("{name}.block{i}"), c_g))
            .collect();
        ImageGuidedEncoder {
            seed_w,
            seed_b,
            blocks,
        }
    }

    /// Returns per-block projected features, highest resolution first; the
    /// last entry is the deep feature at the coarse side.
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, image_hr: Var) -> Result<Vec<Var>> {
        let w = cx.tape.param(cx.reg, self.seed_w);
        let b = cx.tape.param(cx.reg, self.seed_b);
        let mut prev = cx.tape.conv2d_bias(image_hr, w, b, 1);
        let mut feats = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let g = block.forward_projected(cx, prev, image_hr)?;
            feats.push(g);
            if i + 1 < self.blocks.len() {
                prev = cx.tape.avg_pool2(g);
            }
        }
        Ok(feats)
    }
}

/// Decoder block of the dual-flow decoder.
pub struct DecoderBlock {
    /// Aligns the incoming decoder feature to the encoder width.
    pub align: Linear,
    pub cb: ConvBlock,
    pub pred_proj: Linear,
    pub edge_proj: Linear,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, c_in: usize, c_g: usize) -> Self {
        DecoderBlock {
            align: Linear::new(reg, &format!("{name}.align"), c_in, c_g, true, Group::Other),
            cb: ConvBlock::new(reg, &format!("{name}.cb"), c_g + 2, c_g, 1, Group::Other),
            pred_proj: Linear::new(reg, &format!("{name}.pred"), c_g, 1, true, Group::Other),
            edge_proj: Linear::new(reg, &format!("{name}.edge"), c_g, 1, true, Group::Other),
        }
    }

    /// Alignment projection followed by the core computation.
    pub fn forward_from_raw<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        f_in: Var,
        g_block: Var,
        edge_guide: Var,
        prev_stage_pred: Var,
    ) -> Result<(Var, Var, Var)> {
        let aligned = self.align.forward(cx, f_in);
        self.forward(cx, aligned, g_block, edge_guide, prev_stage_pred)
    }

    /// Core block computation on pre-aligned operands:
    /// `F = cb([f + g, edge, prev_pred])`, then the two sigmoid projections.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        f_aligned: Var,
        g_block: Var,
        edge_guide: Var,
        prev_stage_pred: Var,
    ) -> Result<(Var, Var, Var)> {
        let fs = cx.tape.value(f_aligned).shape().to_vec();
        let gs = cx.tape.value(g_block).shape().to_vec();
        if fs != gs {
            return Err(Error::dim(
                "decoder_block",
                format!("decoder feature {fs:?} vs encoder feature {gs:?}"),
            ));
        }
        for (name, v) in [("edge_guide", edge_guide), ("prev_stage_pred", prev_stage_pred)] {
            let s = cx.tape.value(v).shape().to_vec();
            if s[..3] != fs[..3] || s[3] != 1 {
                return Err(Error::dim(
                    "decoder_block",
                    format!("{name} {s:?} does not match feature {fs:?}"),
                ));
            }
        }
        let base = cx.tape.add(f_aligned, g_block);
        let cat = cx.tape.concat_last(&[base, edge_guide, prev_stage_pred]);
        let feat = self.cb.forward(cx, cat);
        let p = self.pred_proj.forward(cx, feat);
        let e = self.edge_proj.forward(cx, feat);
        let p = cx.tape.sigmoid(p);
        let e = cx.tape.sigmoid(e);
        Ok((feat, p, e))
    }
}

/// Everything one decoder block emitted.
pub struct BlockOut {
    pub resolution: usize,
    pub feat: Var,
    pub pred: Var,
    pub edge: Var,
    /// Refined prediction and its selection, where a pixel refiner ran.
    pub refined: Option<Var>,
    pub selection: Option<Vec<PixelIndexSet>>,
}

/// Output of one refinement stage.
pub struct StageOut {
    pub blocks: Vec<BlockOut>,
    /// Final stage prediction at the stage resolution (refined if a refiner
    /// ran on the last block).
    pub final_pred: Var,
    /// The recurrent coarse pass driven by this stage's fused embedding.
    pub coarse: CpsOut,
    /// Deep encoder feature at the coarse side.
    pub g_deep: Var,
}

/// One recurrent refinement stage.
pub struct RefineStage {
    pub resolution: usize,
    pub encoder: ImageGuidedEncoder,
    /// Stage-specific patch embedding over `[image_lr, g_deep]`.
    pub fuse_embed: PatchEmbed,
    pub decoder: Vec<DecoderBlock>,
    pub refiners: Vec<Option<PixelRefiner>>,
    pub pr_k: Vec<usize>,
    pub guide: GuideSource,
}

impl RefineStage {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        cfg: &ModelConfig,
        resolution: usize,
    ) -> Result<Self> {
        let c_g = cfg.encoder_channels;
        let c = cfg.backbone.embed_dim;
        let n_blocks = cfg.n_blocks(resolution);
        let encoder = ImageGuidedEncoder::new(reg, &format!("{name}.ige"), c_g, n_blocks);
        let fuse_embed = PatchEmbed::new(
            reg,
            &format!("{name}.embed"),
            cfg.backbone.patch_size,
            3 + c_g,
            c,
            Group::Other,
        );
        let mut decoder = Vec::with_capacity(n_blocks);
        let mut refiners = Vec::with_capacity(n_blocks);
        let mut pr_k = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let res_b = cfg.scales[0] << b;
            let c_in = if b == 0 { c / 8 } else { c_g };
            decoder.push(DecoderBlock::new(
                reg,
                &format!("{name}.dgd.block{b}"),
                c_in,
                c_g,
            ));
            if cfg.pr_scales.contains(&res_b) {
                refiners.push(Some(PixelRefiner::new(
                    reg,
                    &format!("{name}.pr{b}"),
                    c_g,
                    c / 8,
                    c,
                    Group::Other,
                )));
                pr_k.push(cfg.pr_k.unwrap_or_else(|| default_k(res_b, res_b)));
            } else {
                refiners.push(None);
                pr_k.push(0);
            }
        }
        Ok(RefineStage {
            resolution,
            encoder,
            fuse_embed,
            decoder,
            refiners,
            pr_k,
            guide: cfg.pr_guide,
        })
    }

    /// Run the stage. `image_hr` is the stage-resolution input, `image_lr`
    /// the coarse-side input, `prev_stage_pred` the previous stage's final
    /// prediction at its native resolution.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Cx<T>,
        cps: &Cps,
        image_hr: Var,
        image_lr: Var,
        prev_stage_pred: Option<Var>,
    ) -> Result<StageOut> {
        let prev_pred = prev_stage_pred.ok_or_else(|| {
            Error::contract("run_rrs", "previous stage prediction is required")
        })?;
        let s = cx.tape.value(image_hr).shape().to_vec();
        if s[1] != self.resolution || s[2] != self.resolution {
            return Err(Error::dim(
                "run_rrs",
                format!(
                    "stage input {}x{} does not match resolution {}",
                    s[1], s[2], self.resolution
                ),
            ));
        }

        let feats = self.encoder.forward(cx, image_hr)?;
        let g_deep = *feats.last().expect("at least one encoder block");
        let gd = cx.tape.value(g_deep).shape().to_vec();
        let li = cx.tape.value(image_lr).shape().to_vec();
        if gd[1] != li[1] || gd[2] != li[2] {
            return Err(Error::dim(
                "fuse_and_embed",
                format!("deep feature {gd:?} vs coarse image {li:?}"),
            ));
        }
        let fused_in = cx.tape.concat_last(&[image_lr, g_deep]);
        let tokens = self.fuse_embed.forward(cx, fused_in)?;
        let coarse = cps.forward(cx, None, Some(tokens))?;

        let n_blocks = self.decoder.len();
        let mut blocks: Vec<BlockOut> = Vec::with_capacity(n_blocks);
        let mut edge_guide = coarse.edge;
        let mut feat_prev = coarse.fused;
        let mut working_pred = None;
        for b in 0..n_blocks {
            let res_b = li[1] << b;
            let g_block = feats[n_blocks - 1 - b];
            let f_in = if b == 0 {
                feat_prev
            } else {
                cx.tape.resize_bilinear(feat_prev, res_b, res_b)
            };
            let f_aligned = self.decoder[b].align.forward(cx, f_in);
            let e_r = cx.tape.resize_bilinear(edge_guide, res_b, res_b);
            let p_r = cx.tape.resize_bilinear(prev_pred, res_b, res_b);
            let (feat, pred, edge) =
                self.decoder[b].forward(cx, f_aligned, g_block, e_r, p_r)?;
            let (refined, selection) = match &self.refiners[b] {
                Some(pr) if self.pr_k[b] > 0 => {
                    let guides = guide_maps(
                        self.guide,
                        cx.tape.value(pred),
                        cx.tape.value(edge),
                    );
                    let (r, sets) = pr.run(
                        cx,
                        g_block,
                        feat,
                        &guides,
                        pred,
                        g_deep,
                        coarse.fused,
                        self.pr_k[b],
                    )?;
                    (Some(r), Some(sets))
                }
                _ => (None, None),
            };
            working_pred = Some(refined.unwrap_or(pred));
            edge_guide = edge;
            feat_prev = feat;
            blocks.push(BlockOut {
                resolution: res_b,
                feat,
                pred,
                edge,
                refined,
                selection,
            });
        }
        Ok(StageOut {
            blocks,
            final_pred: working_pred.expect("at least one decoder block"),
            coarse,
            g_deep,
        })
    }
}

/// The full pipeline: coarse stage plus the enabled refinement stages.
pub struct Pipeline {
    pub cfg: ModelConfig,
    pub cps: Cps,
    /// One entry per refinement scale; `None` when ablated away.
    pub stages: Vec<Option<RefineStage>>,
}

/// All predictions of one full forward pass.
pub struct PipelineOut {
    pub coarse: CpsOut,
    pub stage_outs: Vec<Option<StageOut>>,
    /// Final prediction of the last enabled stage (the coarse map if none).
    pub final_pred: Var,
}

impl Pipeline {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let cps = Cps::new(reg, &cfg.backbone)?;
        let mut stages = Vec::new();
        for (i, &scale) in cfg.scales.iter().enumerate().skip(1) {
            if cfg.stage_enabled[i - 1] {
                stages.push(Some(RefineStage::new(
                    reg,
                    &format!("rrs{i}"),
                    cfg,
                    scale,
                )?));
            } else {
                stages.push(None);
            }
        }
        Ok(Pipeline {
            cfg: cfg.clone(),
            cps,
            stages,
        })
    }

    /// `scale_inputs`: one `[n, s, s, 3]` node per configured scale, low to
    /// high (the resized pyramid of the same batch).
    pub fn forward<T: Scalar>(&self, cx: &mut Cx<T>, scale_inputs: &[Var]) -> Result<PipelineOut> {
        if scale_inputs.len() != self.cfg.scales.len() {
            return Err(Error::dim(
                "run_full_model",
                format!(
                    "{} scale inputs for chain {:?}",
                    scale_inputs.len(),
                    self.cfg.scales
                ),
            ));
        }
        for (&v, &s) in scale_inputs.iter().zip(self.cfg.scales.iter()) {
            let sh = cx.tape.value(v).shape().to_vec();
            if sh.len() != 4 || sh[1] != s || sh[2] != s || sh[3] != 3 {
                return Err(Error::dim(
                    "run_full_model",
                    format!("input {sh:?} does not match scale {s}"),
                ));
            }
        }
        let coarse = self.cps.forward(cx, Some(scale_inputs[0]), None)?;
        let mut prev_pred = coarse.pred;
        let mut stage_outs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Some(stage) => {
                    let out = stage.forward(
                        cx,
                        &self.cps,
                        scale_inputs[i + 1],
                        scale_inputs[0],
                        Some(prev_pred),
                    )?;
                    prev_pred = out.final_pred;
                    stage_outs.push(Some(out));
                }
                None => stage_outs.push(None),
            }
        }
        Ok(PipelineOut {
            coarse,
            stage_outs,
            final_pred: prev_pred,
        })
    }
}
