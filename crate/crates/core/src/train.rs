//! Parameter optimization: SGD with momentum and differential learning
//! rates, cosine annealing, the training loop with deep supervision,
//! checkpointing/resume and deterministic prediction.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datagen::{augment, derive_seed, generate_sample, resize_pyramid, Sample};
use crate::error::{Error, Result};
use crate::imageio;
use crate::losses::{total_loss, GroundTruthPyramid, LossReport};
use crate::nn::{Cx, Mode};
use crate::params::{Group, ParamId, ParamRegistry};
use crate::pixel_refiner::PixelIndexSet;
use crate::refine::Pipeline;
use crate::scalar::Scalar;
use crate::tape::stack_batch;
use ndarray::{ArrayD, IxDyn};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::contract(
            "lr_schedule",
            format!("step {step} outside 0..={total_steps}"),
        ));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// SGD with momentum and per-group learning rates.
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    velocity: Vec<(ParamId, ArrayD<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(reg: &ParamRegistry<T>, momentum: f64) -> Self {
        let velocity = reg
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, e)| (id, ArrayD::zeros(e.value.raw_dim())))
            .collect();
        Sgd { momentum, velocity }
    }

    /// `v = m·v + g; p -= lr_group·v`. Parameters with no gradient this step
    /// still decay their momentum.
    pub fn step(
        &mut self,
        reg: &mut ParamRegistry<T>,
        grads: &[(ParamId, ArrayD<T>)],
        lr_backbone: f64,
        lr_other: f64,
    ) {
        let lookup: std::collections::HashMap<usize, &ArrayD<T>> =
            grads.iter().map(|(id, g)| (id.0, g)).collect();
        let m = T::cast(self.momentum);
        for (id, vel) in &mut self.velocity {
            let lr = match reg.entry(*id).group {
                Group::Backbone => lr_backbone,
                Group::Other => lr_other,
            };
            let lr = T::cast(lr);
            match lookup.get(&id.0) {
                Some(g) => {
                    vel.zip_mut_with(g, |v, &gv| *v = *v * m + gv);
                }
                None => {
                    vel.mapv_inplace(|v| v * m);
                }
            }
            reg.value_mut(*id).zip_mut_with(vel, |p, &v| *p = *p - lr * v);
        }
    }

    /// Named momentum buffers for checkpointing.
    pub fn export(&self, reg: &ParamRegistry<T>) -> Vec<(String, Vec<T>)> {
        self.velocity
            .iter()
            .map(|(id, v)| (reg.entry(*id).name.clone(), v.iter().copied().collect()))
            .collect()
    }

    pub fn import(&mut self, reg: &ParamRegistry<T>, stored: &[(String, Vec<T>)]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &Vec<T>> =
            stored.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for (id, vel) in &mut self.velocity {
            let name = &reg.entry(*id).name;
            let Some(data) = by_name.get(name.as_str()) else {
                return Err(Error::Checkpoint(format!(
                    "momentum buffer for {name} missing"
                )));
            };
            if data.len() != vel.len() {
                return Err(Error::Checkpoint(format!(
                    "momentum buffer for {name}: {} values, expected {}",
                    data.len(),
                    vel.len()
                )));
            }
            *vel = ArrayD::from_shape_vec(vel.raw_dim(), (*data).clone()).unwrap();
        }
        Ok(())
    }
}

/// In-memory training set.
pub struct Dataset<T: Scalar> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Synthetic set with per-sample seeds `data_seed + index`.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        if cfg.n_samples == 0 {
            return Err(Error::Config("data.n_samples must be positive".into()));
        }
        let samples = (0..cfg.n_samples)
            .map(|i| generate_sample(cfg.data_seed + i as u64, cfg.hr_side, cfg.complexity))
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    /// Image/mask pairs from `<dir>/images` and `<dir>/masks`, matched by
    /// file name and resized to the top scale.
    pub fn from_dir(dir: &Path, top_scale: usize) -> Result<Self> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        let mut names: Vec<String> = std::fs::read_dir(&images)
            .map_err(|e| Error::io(images.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut samples = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let img = imageio::load_rgb::<T>(&images.join(name))?;
            let mask_path = masks.join(name);
            let mask = imageio::load_mask::<T>(&mask_path)?;
            let s = img.shape().to_vec();
            let img4 = img
                .into_shape_with_order(IxDyn(&[1, s[0], s[1], 3]))
                .unwrap();
            let image = crate::tape::resize_bilinear_array(&img4, top_scale, top_scale)
                .into_shape_with_order(IxDyn(&[top_scale, top_scale, 3]))
                .unwrap()
                .mapv(|v| v.max(T::zero()).min(T::one()));
            let ms = mask.shape().to_vec();
            let mask4 = mask
                .into_shape_with_order(IxDyn(&[1, ms[0], ms[1], 1]))
                .unwrap();
            let mask = crate::tape::resize_nearest_array(&mask4, top_scale, top_scale)
                .into_shape_with_order(IxDyn(&[top_scale, top_scale]))
                .unwrap();
            samples.push(Sample {
                image,
                mask,
                seed: i as u64,
                meta: crate::datagen::SampleMeta {
                    n_objects: 0,
                    boundary_complexity: f64::NAN,
                },
            });
        }
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "no samples found under {}",
                dir.display()
            )));
        }
        Ok(Dataset { samples })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        if cfg.data_dir.is_empty() {
            Self::synthetic(cfg)
        } else {
            Self::from_dir(
                Path::new(&cfg.data_dir),
                *cfg.scales.last().expect("validated"),
            )
        }
    }
}

/// Assemble one batch: augmented pyramids stacked per scale plus the mask
/// batch at the top scale.
fn assemble_batch<T: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset<T>,
    step: usize,
) -> Result<(Vec<ArrayD<T>>, ArrayD<T>)> {
    let n = dataset.samples.len();
    let b = cfg.batch_size.max(1);
    let opts = cfg.augment_options();
    let mut per_scale: Vec<Vec<ArrayD<T>>> = vec![Vec::with_capacity(b); cfg.scales.len()];
    let mut masks: Vec<ArrayD<T>> = Vec::with_capacity(b);
    for slot in 0..b {
        let idx = (step * b + slot) % n;
        let sample = &dataset.samples[idx];
        let item = if cfg.augment {
            augment(
                sample,
                derive_seed(cfg.seed, step as u64, slot as u64),
                &opts,
            )?
        } else {
            sample.clone()
        };
        let pyramid = resize_pyramid(&item.image, &cfg.scales)?;
        for (lvl, img) in pyramid.into_iter().enumerate() {
            per_scale[lvl].push(img);
        }
        let ms = item.mask.shape().to_vec();
        masks.push(
            item.mask
                .into_shape_with_order(IxDyn(&[ms[0], ms[1], 1]))
                .unwrap(),
        );
    }
    let inputs = per_scale.into_iter().map(|v| stack_batch(&v)).collect();
    Ok((inputs, stack_batch(&masks)))
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps_run: usize,
    pub last_report: Option<LossReport>,
}

fn csv_header(n_refine: usize) -> String {
    let mut s = String::from("step,lr_backbone,lr_other,loss_cps");
    for i in 1..=n_refine {
        s.push_str(&format!(",loss_rrs{i}"));
    }
    s.push_str(",loss_total\n");
    s
}

/// Run (or resume) training. The dtype is the caller's choice of `T`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let model_cfg = cfg.model_config()?;
    let dataset = Dataset::<T>::load(cfg)?;
    let total_steps = cfg.total_steps(dataset.samples.len());
    if total_steps == 0 {
        return Err(Error::Config("zero training steps".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut reg = ParamRegistry::<T>::new(cfg.seed);
    let pipeline = Pipeline::new(&mut reg, &model_cfg)?;
    let mut sgd = Sgd::new(&reg, cfg.momentum);
    let config_text = cfg.to_text();
    std::fs::write(out_dir.join("config_resolved.txt"), &config_text)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let csv_path = out_dir.join("loss.csv");
    let mut start_step = 0usize;
    if let Some(ckpt_path) = resume {
        let bytes = checkpoint::load_bytes(ckpt_path)?;
        let ckpt = checkpoint::decode::<T>(&bytes)?;
        if ckpt.config_text != config_text {
            return Err(Error::Checkpoint(
                "resume config does not match the checkpoint's configuration".into(),
            ));
        }
        checkpoint::apply_to_registry(&ckpt, &mut reg)?;
        sgd.import(&reg, &ckpt.momentum)?;
        start_step = ckpt.step as usize;
    }
    let mut csv = if start_step > 0 && csv_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?
    } else {
        let mut f = std::fs::File::create(&csv_path)
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        f.write_all(csv_header(model_cfg.scales.len() - 1).as_bytes())
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        f
    };

    let mut last_report = None;
    for step in start_step..total_steps {
        let lr_b = lr_schedule(step, total_steps, cfg.lr_backbone)?;
        let lr_o = lr_schedule(step, total_steps, cfg.lr_other)?;
        let (inputs, mask_batch) = assemble_batch(cfg, &dataset, step)?;
        let gt = GroundTruthPyramid::new(&mask_batch, &model_cfg.scales, cfg.edge_width)?;

        let mut cx = Cx::new(&mut reg, Mode::Train);
        let input_vars: Vec<_> = inputs.into_iter().map(|a| cx.tape.input(a)).collect();
        let out = pipeline.forward(&mut cx, &input_vars)?;
        let (loss_node, report) =
            total_loss(&mut cx, &out, &gt, &cfg.loss_weights, cfg.supervise_refined)?;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite { term, step });
        }
        let grads = cx.tape.backward(loss_node);
        let pgrads: Vec<(ParamId, ArrayD<T>)> = cx
            .tape
            .touched_params()
            .into_iter()
            .filter_map(|(pid, var)| grads.get(var).map(|g| (pid, g.clone())))
            .collect();
        drop(cx);
        sgd.step(&mut reg, &pgrads, lr_b, lr_o);

        let mut row = format!("{step},{lr_b},{lr_o},{}", report.stage_total("cps"));
        for i in 1..model_cfg.scales.len() {
            row.push_str(&format!(",{}", report.stage_total(&format!("rrs{i}"))));
        }
        row.push_str(&format!(",{}\n", report.total));
        csv.write_all(row.as_bytes())
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        last_report = Some(report);

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
            let path = out_dir.join(format!("ckpt_{done:06}.bin"));
            checkpoint::save(&path, &reg, &sgd.export(&reg), done as u64, &config_text)?;
        }
    }
    let final_path = out_dir.join("ckpt_final.bin");
    checkpoint::save(
        &final_path,
        &reg,
        &sgd.export(&reg),
        total_steps as u64,
        &config_text,
    )?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        loss_csv: csv_path,
        steps_run: total_steps - start_step,
        last_report,
    })
}

/// A model restored from a checkpoint, ready for inference.
pub struct LoadedModel<T: Scalar> {
    pub cfg: RunConfig,
    pub reg: ParamRegistry<T>,
    pub pipeline: Pipeline,
}

pub fn load_model<T: Scalar>(ckpt_path: &Path) -> Result<LoadedModel<T>> {
    let bytes = checkpoint::load_bytes(ckpt_path)?;
    let ckpt = checkpoint::decode::<T>(&bytes)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let model_cfg = cfg.model_config()?;
    let mut reg = ParamRegistry::<T>::new(cfg.seed);
    let pipeline = Pipeline::new(&mut reg, &model_cfg)?;
    checkpoint::apply_to_registry(&ckpt, &mut reg)?;
    Ok(LoadedModel { cfg, reg, pipeline })
}

/// One named output map of a prediction pass.
pub struct PredictedMap<T: Scalar> {
    pub suffix: String,
    pub map: ArrayD<T>,
}

/// Deterministic inference on one image (auto-resized to the top scale).
/// Returns the per-stage saliency maps, low to high, plus optional binary
/// masks of the refiner selections.
pub fn predict<T: Scalar>(
    model: &mut LoadedModel<T>,
    image: &ArrayD<T>,
    dump_selection: bool,
) -> Result<Vec<PredictedMap<T>>> {
    let scales = model.cfg.scales.clone();
    let top = *scales.last().unwrap();
    let s = image.shape().to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim(
            "predict",
            format!("expected [h,w,3] image, got {s:?}"),
        ));
    }
    let img4 = image
        .clone()
        .into_shape_with_order(IxDyn(&[1, s[0], s[1], 3]))
        .unwrap();
    let resized = crate::tape::resize_bilinear_array(&img4, top, top)
        .mapv(|v| v.max(T::zero()).min(T::one()));
    let mut cx = Cx::new(&mut model.reg, Mode::Eval);
    let mut inputs = Vec::with_capacity(scales.len());
    let hr = cx.tape.input(resized);
    for &sc in &scales[..scales.len() - 1] {
        let v = cx.tape.resize_bilinear(hr, sc, sc);
        inputs.push(v);
    }
    inputs.push(hr);
    let out = model.pipeline.forward(&mut cx, &inputs)?;

    let squeeze = |a: &ArrayD<T>| -> ArrayD<T> {
        let sh = a.shape().to_vec();
        a.clone()
            .into_shape_with_order(IxDyn(&[sh[1], sh[2]]))
            .unwrap()
    };
    let mut maps = vec![PredictedMap {
        suffix: "pl".to_string(),
        map: squeeze(cx.tape.value(out.coarse.pred)),
    }];
    let n_stages = out.stage_outs.len();
    for (i, st) in out.stage_outs.iter().enumerate() {
        let Some(st) = st else { continue };
        let suffix = if i + 1 == n_stages {
            "ph".to_string()
        } else if i == 0 {
            "pm".to_string()
        } else {
            format!("pm{}", i + 1)
        };
        maps.push(PredictedMap {
            suffix,
            map: squeeze(cx.tape.value(st.final_pred)),
        });
        if dump_selection {
            for block in &st.blocks {
                if let Some(sets) = &block.selection {
                    maps.push(PredictedMap {
                        suffix: format!("epos_{}", block.resolution),
                        map: selection_mask(&sets[0]),
                    });
                }
            }
        }
    }
    Ok(maps)
}

/// Binary mask of one selection set.
pub fn selection_mask<T: Scalar>(set: &PixelIndexSet) -> ArrayD<T> {
    let (h, w) = set.shape;
    let mut m = ArrayD::<T>::zeros(IxDyn(&[h, w]));
    {
        let ms = m.as_slice_mut().unwrap();
        for &i in &set.indices {
            ms[i] = T::one();
        }
    }
    m
}
