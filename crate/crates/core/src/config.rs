//! Line-oriented `key = value` run configuration with defaults, strict
//! unknown-key rejection and command-line overrides.

use crate::backbone::BackboneConfig;
use crate::datagen::AugmentOptions;
use crate::error::{Error, Result};
use crate::pixel_refiner::GuideSource;
use crate::refine::ModelConfig;
use crate::scalar::Dtype;

/// Everything a run needs; see `RunConfig::default()` for the toy defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub scales: Vec<usize>,
    pub stage_enabled: Vec<bool>,
    pub encoder_channels: usize,

    pub pr_scales: Vec<usize>,
    /// 0 selects the automatic `4·side` rule.
    pub pr_k: usize,
    pub pr_guide: GuideSource,

    pub loss_weights: Vec<f64>,
    pub supervise_refined: bool,
    pub edge_width: usize,

    pub lr_backbone: f64,
    pub lr_other: f64,
    pub momentum: f64,
    /// Optimization steps; 0 derives the count from `epochs`.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub dtype: Dtype,

    pub n_samples: usize,
    pub hr_side: usize,
    pub complexity: f64,
    pub data_seed: u64,
    pub flip_prob: f64,
    pub crop_fraction: f64,
    /// Directory of real image/mask pairs; empty selects synthetic data.
    pub data_dir: String,

    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 32,
            patch_size: 4,
            window_size: 4,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            scales: vec![64, 128, 256],
            stage_enabled: vec![true, true],
            encoder_channels: 32,
            pr_scales: vec![128, 256],
            pr_k: 0,
            pr_guide: GuideSource::Edge,
            loss_weights: vec![1.0, 1.0, 1.0],
            supervise_refined: true,
            edge_width: 2,
            lr_backbone: 0.001,
            lr_other: 0.01,
            momentum: 0.9,
            steps: 0,
            epochs: 32,
            batch_size: 3,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            dtype: Dtype::F32,
            n_samples: 8,
            hr_side: 256,
            complexity: 0.6,
            data_seed: 0,
            flip_prob: 0.5,
            crop_fraction: 0.875,
            data_dir: String::new(),
            out_dir: "out".into(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{p}`")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: `{other}` is not a bool"))),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.embed_dim" => self.embed_dim = parse_scalar(value, key)?,
            "model.patch_size" => self.patch_size = parse_scalar(value, key)?,
            "model.window_size" => self.window_size = parse_scalar(value, key)?,
            "model.depths" => {
                let v: Vec<usize> = parse_list(value, key)?;
                self.depths = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: need 4 entries")))?;
            }
            "model.heads" => {
                let v: Vec<usize> = parse_list(value, key)?;
                self.heads = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: need 4 entries")))?;
            }
            "model.scales" => self.scales = parse_list(value, key)?,
            "model.stage_enabled" => {
                self.stage_enabled = value
                    .split(',')
                    .map(|p| parse_bool(p, key))
                    .collect::<Result<_>>()?;
            }
            "model.encoder_channels" => self.encoder_channels = parse_scalar(value, key)?,
            "pr.scales" => {
                let t = value.trim();
                self.pr_scales = if t.is_empty() || t == "none" {
                    Vec::new()
                } else {
                    parse_list(t, key)?
                };
            }
            "pr.k" => {
                self.pr_k = if value.trim() == "auto" {
                    0
                } else {
                    parse_scalar(value, key)?
                };
            }
            "pr.guide" => {
                self.pr_guide = match value.trim() {
                    "edge" => GuideSource::Edge,
                    "absdiff" => GuideSource::AbsDiff,
                    other => {
                        return Err(Error::Config(format!(
                            "pr.guide: `{other}` is not edge|absdiff"
                        )))
                    }
                };
            }
            "loss.weights" => self.loss_weights = parse_list(value, key)?,
            "loss.supervise_refined" => self.supervise_refined = parse_bool(value, key)?,
            "loss.edge_width" => self.edge_width = parse_scalar(value, key)?,
            "train.lr_backbone" => self.lr_backbone = parse_scalar(value, key)?,
            "train.lr_other" => self.lr_other = parse_scalar(value, key)?,
            "train.momentum" => self.momentum = parse_scalar(value, key)?,
            "train.steps" => self.steps = parse_scalar(value, key)?,
            "train.epochs" => self.epochs = parse_scalar(value, key)?,
            "train.batch_size" => self.batch_size = parse_scalar(value, key)?,
            "train.seed" => self.seed = parse_scalar(value, key)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_scalar(value, key)?,
            "train.augment" => self.augment = parse_bool(value, key)?,
            "train.dtype" => {
                self.dtype = match value.trim() {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    other => {
                        return Err(Error::Config(format!(
                            "train.dtype: `{other}` is not f32|f64"
                        )))
                    }
                };
            }
            "data.n_samples" => self.n_samples = parse_scalar(value, key)?,
            "data.hr_side" => self.hr_side = parse_scalar(value, key)?,
            "data.complexity" => self.complexity = parse_scalar(value, key)?,
            "data.seed" => self.data_seed = parse_scalar(value, key)?,
            "data.flip_prob" => self.flip_prob = parse_scalar(value, key)?,
            "data.crop_fraction" => self.crop_fraction = parse_scalar(value, key)?,
            "data.dir" => self.data_dir = value.trim().to_string(),
            "out.dir" => self.out_dir = value.trim().to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a config file body. Unknown keys and malformed lines are
    /// rejected with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides (command-line flags win over the file).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let Some((key, value)) = ov.split_once('=') else {
                return Err(Error::Config(format!(
                    "override `{ov}`: expected key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical resolved form: every key, one per line, stable order.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let joinf = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        s.push_str(&format!("data.complexity = {}\n", self.complexity));
        s.push_str(&format!("data.crop_fraction = {}\n", self.crop_fraction));
        s.push_str(&format!("data.dir = {}\n", self.data_dir));
        s.push_str(&format!("data.flip_prob = {}\n", self.flip_prob));
        s.push_str(&format!("data.hr_side = {}\n", self.hr_side));
        s.push_str(&format!("data.n_samples = {}\n", self.n_samples));
        s.push_str(&format!("data.seed = {}\n", self.data_seed));
        s.push_str(&format!("loss.edge_width = {}\n", self.edge_width));
        s.push_str(&format!(
            "loss.supervise_refined = {}\n",
            self.supervise_refined
        ));
        s.push_str(&format!("loss.weights = {}\n", joinf(&self.loss_weights)));
        s.push_str(&format!("model.depths = {}\n", join(&self.depths)));
        s.push_str(&format!("model.embed_dim = {}\n", self.embed_dim));
        s.push_str(&format!(
            "model.encoder_channels = {}\n",
            self.encoder_channels
        ));
        s.push_str(&format!("model.heads = {}\n", join(&self.heads)));
        s.push_str(&format!("model.patch_size = {}\n", self.patch_size));
        s.push_str(&format!("model.scales = {}\n", join(&self.scales)));
        s.push_str(&format!(
            "model.stage_enabled = {}\n",
            self.stage_enabled
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("model.window_size = {}\n", self.window_size));
        s.push_str(&format!("out.dir = {}\n", self.out_dir));
        s.push_str(&format!(
            "pr.guide = {}\n",
            match self.pr_guide {
                GuideSource::Edge => "edge",
                GuideSource::AbsDiff => "absdiff",
            }
        ));
        s.push_str(&format!(
            "pr.k = {}\n",
            if self.pr_k == 0 {
                "auto".to_string()
            } else {
                self.pr_k.to_string()
            }
        ));
        s.push_str(&format!("pr.scales = {}\n", join(&self.pr_scales)));
        s.push_str(&format!("train.augment = {}\n", self.augment));
        s.push_str(&format!("train.batch_size = {}\n", self.batch_size));
        s.push_str(&format!(
            "train.checkpoint_every = {}\n",
            self.checkpoint_every
        ));
        s.push_str(&format!(
            "train.dtype = {}\n",
            match self.dtype {
                Dtype::F32 => "f32",
                Dtype::F64 => "f64",
            }
        ));
        s.push_str(&format!("train.epochs = {}\n", self.epochs));
        s.push_str(&format!("train.lr_backbone = {}\n", self.lr_backbone));
        s.push_str(&format!("train.lr_other = {}\n", self.lr_other));
        s.push_str(&format!("train.momentum = {}\n", self.momentum));
        s.push_str(&format!("train.seed = {}\n", self.seed));
        s.push_str(&format!("train.steps = {}\n", self.steps));
        s
    }

    /// The model configuration this run describes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let backbone = BackboneConfig {
            embed_dim: self.embed_dim,
            patch_size: self.patch_size,
            window_size: self.window_size,
            depths: self.depths,
            heads: self.heads,
            input_side: *self
                .scales
                .first()
                .ok_or_else(|| Error::Config("empty scale chain".into()))?,
        };
        let cfg = ModelConfig {
            backbone,
            scales: self.scales.clone(),
            stage_enabled: self.stage_enabled.clone(),
            encoder_channels: self.encoder_channels,
            pr_scales: self.pr_scales.clone(),
            pr_k: (self.pr_k > 0).then_some(self.pr_k),
            pr_guide: self.pr_guide,
        };
        cfg.validate()?;
        if self.hr_side != *self.scales.last().unwrap() && self.data_dir.is_empty() {
            return Err(Error::Config(format!(
                "data.hr_side {} must equal the top scale {}",
                self.hr_side,
                self.scales.last().unwrap()
            )));
        }
        if self.loss_weights.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "loss.weights needs {} entries (coarse + refinements), got {}",
                self.scales.len(),
                self.loss_weights.len()
            )));
        }
        Ok(cfg)
    }

    pub fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            flip_prob: self.flip_prob,
            crop_fraction: self.crop_fraction,
        }
    }

    /// Total optimization steps, deriving from epochs when unset.
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            let per_epoch = dataset_len.div_ceil(self.batch_size.max(1)).max(1);
            self.epochs * per_epoch
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfig::parse("model.embed_dim = 32\nbogus.key = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn override_beats_file_value() {
        let mut cfg = RunConfig::parse("train.steps = 600\n").unwrap();
        cfg.apply_overrides(&["train.steps=5".into()]).unwrap();
        assert_eq!(cfg.steps, 5);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\ntrain.seed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
