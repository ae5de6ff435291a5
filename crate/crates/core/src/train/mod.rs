//! Training: AdamW updates, freezing for the two-stage attention schedule,
//! the epoch loop, and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, read_checkpoint, save_checkpoint, Checkpoint,
    FORMAT_VERSION, MAGIC,
};
pub use optim::{optimizer_step, AdamWParams, Moments, OptimState};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{self, HeadGrid, LossConfig, Target};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::geometry::{BBox, LossKind};
use crate::kv::{self, KvFile};
use crate::model::{Group, ModelGraph};
use crate::nn::Ctx;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Which parameters stay trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSpec {
    #[default]
    None,
    /// Only coordinate-attention blocks and detection heads train.
    BackboneAndNeck,
}

impl fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeSpec::None => "none",
            FreezeSpec::BackboneAndNeck => "backbone_and_neck",
        })
    }
}

impl FromStr for FreezeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(FreezeSpec::None),
            "backbone_and_neck" => Ok(FreezeSpec::BackboneAndNeck),
            other => Err(Error::config(format!(
                "unknown freeze spec {other:?} (none or backbone_and_neck)"
            ))),
        }
    }
}

fn trains_in(group: Group, spec: FreezeSpec) -> bool {
    match spec {
        FreezeSpec::None => true,
        FreezeSpec::BackboneAndNeck => matches!(group, Group::Attention | Group::Head(_)),
    }
}

/// Sets every parameter's trainable flag according to `spec`.
pub fn freeze(model: &mut ModelGraph, spec: FreezeSpec) {
    let groups: BTreeMap<String, Group> = model
        .store()
        .names()
        .filter_map(|n| model.group_of_param(n).map(|g| (n.clone(), g)))
        .collect();
    for (name, p) in model.store_mut().params_mut() {
        p.trainable = groups.get(name).is_some_and(|g| trains_in(*g, spec));
    }
}

/// Groups retrained in the second stage: attention and every active head.
pub fn stage2_groups(model: &ModelGraph) -> Vec<Group> {
    let mut g = vec![Group::Attention];
    g.extend(model.heads().into_iter().map(Group::Head));
    g
}

/// Seed offset for the stage-two re-draw, so it differs from the initial one.
const STAGE2_SEED_SALT: u64 = 0x5354_4147_4532;

/// Prepares the second stage: re-draws attention and head parameters from
/// `seed` and freezes everything else.
pub fn prepare_stage2(model: &mut ModelGraph, seed: u64) {
    let groups = stage2_groups(model);
    model.reinit_groups(&groups, seed ^ STAGE2_SEED_SALT);
    freeze(model, FreezeSpec::BackboneAndNeck);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze: FreezeSpec,
    pub loss: LossConfig,
    /// Random horizontal flips.
    pub mirror: bool,
    /// Evaluate on the validation split every this many epochs and after
    /// the last one; 0 evaluates only after the last epoch.
    pub eval_every: usize,
    /// Hand a checkpoint to the epoch hook every this many epochs; 0 never.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hyper = AdamWParams::default();
        Self {
            epochs: 100,
            batch_size: 4,
            lr: hyper.lr,
            weight_decay: hyper.weight_decay,
            seed: 0,
            freeze: FreezeSpec::None,
            loss: LossConfig::default(),
            mirror: false,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "seed",
        "freeze",
        "box_loss",
        "lambda_box",
        "lambda_obj",
        "lambda_cls",
        "mirror",
        "eval_every",
        "checkpoint_every",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        self.loss.validate()
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWParams::default()
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let mut c = Self::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("epochs", c.epochs);
        take!("batch_size", c.batch_size);
        take!("lr", c.lr);
        take!("weight_decay", c.weight_decay);
        take!("seed", c.seed);
        take!("freeze", c.freeze);
        if let Some(kind) = kv.get::<LossKind>("box_loss")? {
            c.loss.box_kind = kind;
        }
        take!("lambda_box", c.loss.lambda_box);
        take!("lambda_obj", c.loss.lambda_obj);
        take!("lambda_cls", c.loss.lambda_cls);
        if let Some(v) = kv.get_raw("mirror") {
            c.mirror = kv::parse_bool(v)?;
        }
        take!("eval_every", c.eval_every);
        take!("checkpoint_every", c.checkpoint_every);
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv_string(&self) -> String {
        kv::render(&[
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze", self.freeze.to_string()),
            ("box_loss", self.loss.box_kind.to_string()),
            ("lambda_box", self.loss.lambda_box.to_string()),
            ("lambda_obj", self.loss.lambda_obj.to_string()),
            ("lambda_cls", self.loss.lambda_cls.to_string()),
            ("mirror", self.mirror.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ])
    }
}

/// One line of training history. Metrics are absent for epochs without
/// validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub ap50: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Flips an image and its boxes left to right.
fn mirrored(sample: &Sample) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        data.extend(src[y * w..(y + 1) * w].iter().rev());
    }
    let targets = sample
        .targets
        .iter()
        .map(|t| Target {
            bbox: BBox::new(w as f64 - t.bbox.cx, t.bbox.cy, t.bbox.w, t.bbox.h),
            class_id: t.class_id,
        })
        .collect();
    Ok(Sample {
        image: Tensor::new(&[1, h, w], data)?,
        targets,
        contrast: sample.contrast.clone(),
    })
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
}

/// Names the layer to blame for a non-finite loss or gradient.
fn blame(model: &ModelGraph, images: &Tensor<f32>, grads: Option<&BTreeMap<String, Vec<f32>>>) -> String {
    let ctx = Ctx::<f32>::train(model.store());
    if let Ok(Some(layer)) = model.first_non_finite_layer(&ctx, images) {
        return layer;
    }
    if let Some(grads) = grads {
        for l in model.layers() {
            let bad = grads
                .iter()
                .any(|(n, g)| crate::model::layer_of(n) == l.name && g.iter().any(|v| !v.is_finite()));
            if bad {
                return l.name.clone();
            }
        }
    }
    "loss".to_string()
}

/// Forward, loss, backward and AdamW update on one batch.
pub fn train_step(
    model: &mut ModelGraph,
    batch: &[&Sample],
    loss_cfg: &LossConfig,
    state: &mut OptimState,
    position: (usize, usize),
) -> Result<StepLoss> {
    let images = eval::stack_images(batch)?;
    let (_, _, h, w) = images.dims4()?;
    let head_strides = model.head_strides();
    let strides: BTreeMap<_, _> = head_strides.iter().copied().collect();
    let grids = HeadGrid::for_image(&head_strides, h, w);
    let targets: Vec<Vec<Target>> = batch.iter().map(|s| s.targets.clone()).collect();
    let assignment = detect::assign_targets(&targets, &grids)?;

    let (breakdown, grads, stats) = {
        let ctx = Ctx::<f32>::train(model.store());
        let outputs = model.forward_with(&ctx, &images)?;
        let (loss, breakdown) = detect::total_loss(&outputs, &strides, &assignment, loss_cfg)?;
        if !breakdown.total.is_finite() {
            let (epoch, step) = position;
            return Err(Error::NonFinite {
                epoch,
                step,
                layer: blame(model, &images, None),
            });
        }
        loss.backward()?;
        (breakdown, ctx.grads(), ctx.take_stats())
    };
    if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
        let (epoch, step) = position;
        return Err(Error::NonFinite {
            epoch,
            step,
            layer: blame(model, &images, Some(&grads)),
        });
    }
    for (name, s) in stats {
        model.store_mut().update_stats(&name, s)?;
    }
    optimizer_step(model.store_mut(), &grads, state)?;
    Ok(StepLoss {
        total: breakdown.total,
        box_loss: breakdown.box_loss,
        obj: breakdown.obj,
        cls: breakdown.cls,
    })
}

/// Runs `cfg.epochs` epochs and returns the history. `hook` sees every
/// record together with the model and optimizer state after that epoch, and
/// whether a checkpoint is due.
pub fn train_with_hook(
    model: &mut ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    state: &mut OptimState,
    mut hook: impl FnMut(&EpochRecord, &ModelGraph, &OptimState, bool) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    freeze(model, cfg.freeze);
    state.hyper = cfg.adamw();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flipped: Vec<Sample>;
            let batch: Vec<&Sample> = if cfg.mirror {
                flipped = chunk
                    .iter()
                    .map(|&i| {
                        if rng.random_bool(0.5) {
                            mirrored(&train_set[i])
                        } else {
                            Ok(train_set[i].clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let l = train_step(model, &batch, &cfg.loss, state, (epoch, step + 1))?;
            for (s, v) in sums.iter_mut().zip([l.total, l.box_loss, l.obj, l.cls]) {
                *s += v;
            }
            steps += 1;
        }
        let mean = sums.map(|s| s / steps as f64);
        let evaluate =
            !val_set.is_empty() && (epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0));
        let report: Option<EvalReport> = if evaluate {
            Some(eval::evaluate_model(model, val_set, cfg.batch_size)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss_total: mean[0],
            loss_box: mean[1],
            loss_obj: mean[2],
            loss_cls: mean[3],
            precision: report.as_ref().map(|r| r.precision),
            recall: report.as_ref().map(|r| r.recall),
            f1: report.as_ref().map(|r| r.f1),
            ap50: report.as_ref().map(|r| r.ap50),
        };
        let checkpoint_due = cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs);
        hook(&record, model, state, checkpoint_due)?;
        history.push(record);
    }
    Ok(history)
}

pub fn train(
    model: &mut ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    state: &mut OptimState,
) -> Result<Vec<EpochRecord>> {
    train_with_hook(model, train_set, val_set, cfg, state, |_, _, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    #[test]
    fn mirroring_flips_pixels_and_boxes() {
        let s = generate_scene(&SceneConfig::fast(), 0).unwrap();
        let m = mirrored(&s).unwrap();
        let w = s.width();
        assert_eq!(m.image.data()[0], s.image.data()[w - 1]);
        for (a, b) in s.targets.iter().zip(&m.targets) {
            assert_eq!(a.bbox.cx + b.bbox.cx, w as f64);
            assert_eq!((a.bbox.cy, a.bbox.w, a.bbox.h), (b.bbox.cy, b.bbox.w, b.bbox.h));
        }
        assert_eq!(mirrored(&m).unwrap().image.data(), s.image.data());
    }

    #[test]
    fn train_config_kv_round_trip() {
        let c = TrainConfig {
            epochs: 7,
            lr: 2.5e-3,
            freeze: FreezeSpec::BackboneAndNeck,
            loss: LossConfig::with_kind(LossKind::Ciou),
            mirror: true,
            ..TrainConfig::default()
        };
        let kv = KvFile::parse(&c.to_kv_string(), "t.cfg").unwrap();
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn train_config_rejects_bad_values() {
        for text in [
            "epochs = 0",
            "batch_size = 0",
            "lr = -1",
            "freeze = all",
            "box_loss = giou",
            "speed = 3",
        ] {
            let kv = KvFile::parse(text, "t.cfg").unwrap();
            assert!(TrainConfig::from_kv(&kv).is_err(), "{text}");
        }
    }

    #[test]
    fn history_record_serializes_missing_metrics_as_null() {
        let r = EpochRecord {
            epoch: 1,
            loss_total: 1.0,
            loss_box: 0.5,
            loss_obj: 0.25,
            loss_cls: 0.25,
            precision: None,
            recall: None,
            f1: None,
            ap50: Some(0.5),
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line().unwrap()).unwrap();
        assert!(v["precision"].is_null());
        assert_eq!(v["ap50"], 0.5);
        for key in [
            "epoch",
            "loss_total",
            "loss_box",
            "loss_obj",
            "loss_cls",
            "recall",
            "f1",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
