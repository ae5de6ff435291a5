//! Subcommand implementations. Every command writes its artifacts and one
//! `manifest.json` into `--out`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;
use tyrist_core::detect::{self, DEFAULT_NMS_IOU};
use tyrist_core::eval::{self, AP_SCORE_FLOOR};
use tyrist_core::geometry::{self, BBox};
use tyrist_core::kv::KvFile;
use tyrist_core::model::{parse_heads, Head, ModelConfig, ModelGraph, PanMode};
use tyrist_core::synth::{self, DatasetConfig, Sample};
use tyrist_core::train::{self, load_checkpoint, save_checkpoint, FreezeSpec, OptimState, TrainConfig};
use tyrist_core::Error;

use crate::args::{EvalArgs, FlopsArgs, LandscapeArgs, SynthArgs, TrainArgs, TrimArgs};
use crate::manifest::RunManifest;

type Overrides = [(String, String)];

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

/// Reads an optional config file and applies the overrides whose keys are
/// in `keys`.
fn resolve_kv(path: Option<&Path>, overrides: &Overrides, keys: &[&str]) -> Result<KvFile> {
    let mut kv = match path {
        Some(p) => KvFile::read(p)?,
        None => KvFile::parse("", "<defaults>")?,
    };
    for (k, v) in overrides.iter().filter(|(k, _)| keys.contains(&k.as_str())) {
        kv.set(k, v.clone());
    }
    Ok(kv)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn input_size_shape(size: usize) -> Result<[usize; 4]> {
    if size == 0 {
        bail!(Error::InvalidArgument("input size must be positive".into()));
    }
    Ok([1, 1, size, size])
}

/// Smallest PAN mode that still reaches every head in `heads`.
fn minimal_pan(heads: &BTreeSet<Head>) -> PanMode {
    if heads.iter().any(|h| matches!(h, Head::P4 | Head::P5)) {
        PanMode::Full
    } else if heads.contains(&Head::P3) {
        PanMode::Partial
    } else {
        PanMode::Identity
    }
}

/// Train and validation splits of a dataset directory: `train/` + `val/`
/// when present, otherwise the directory itself with no validation split.
fn load_splits(dir: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !dir.exists() {
        bail!(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    let (tr, va) = (dir.join("train"), dir.join("val"));
    if tr.is_dir() {
        let train = synth::load_dataset_dir(&tr)?;
        let val = if va.is_dir() {
            synth::load_dataset_dir(&va)?
        } else {
            Vec::new()
        };
        Ok((train, val))
    } else {
        Ok((synth::load_dataset_dir(dir)?, Vec::new()))
    }
}

fn eval_split(dir: &Path) -> Result<Vec<Sample>> {
    let va = dir.join("val");
    if va.is_dir() {
        Ok(synth::load_dataset_dir(&va)?)
    } else {
        Ok(load_splits(dir)?.0)
    }
}

pub fn synth(a: &SynthArgs, overrides: &Overrides, argv: &[String]) -> Result<()> {
    let kv = resolve_kv(a.config.as_deref(), overrides, &DatasetConfig::KEYS)?;
    let mut cfg = DatasetConfig::from_kv(&kv)?;
    if let Some(seed) = a.seed {
        cfg.scene.seed = seed;
    }
    cfg.scene.validate()?;
    create_out(&a.out)?;
    let (train, val) = synth::generate_dataset(&cfg)?;
    let (tr, va) = (a.out.join("train"), a.out.join("val"));
    synth::write_dataset(&tr, &train)?;
    synth::write_dataset(&va, &val)?;
    let cfg_path = a.out.join("dataset.cfg");
    write_text(&cfg_path, &cfg.to_kv_string())?;
    info!(
        "wrote {} train and {} val images to {}",
        train.len(),
        val.len(),
        a.out.display()
    );

    let mut m = RunManifest::new("synth", argv, Some(cfg.scene.seed)).config("dataset", cfg.to_kv_string());
    if let Some(p) = &a.config {
        m = m.input(p)?;
    }
    m.output(&tr).output(&va).output(&cfg_path).write(&a.out)?;
    Ok(())
}

pub fn train(a: &TrainArgs, overrides: &Overrides, argv: &[String]) -> Result<()> {
    let train_kv = resolve_kv(a.train_config.as_deref(), overrides, &TrainConfig::KEYS)?;
    let mut tc = TrainConfig::from_kv(&train_kv)?;
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    let (mut model, mut state) = match &a.init {
        Some(ckpt) => {
            if a.model_config.is_some() || overrides.iter().any(|(k, _)| ModelConfig::KEYS.contains(&k.as_str())) {
                bail!(Error::Config(
                    "--init takes the model config from the checkpoint; drop model config options".into()
                ));
            }
            let (model, optim) = load_checkpoint(ckpt)?;
            (model, optim.unwrap_or_else(|| OptimState::new(tc.adamw())))
        }
        None => {
            let kv = resolve_kv(a.model_config.as_deref(), overrides, &ModelConfig::KEYS)?;
            let mc = ModelConfig::from_kv(&kv)?;
            (ModelGraph::build(&mc, tc.seed)?, OptimState::new(tc.adamw()))
        }
    };
    if a.stage2 {
        train::prepare_stage2(&mut model, tc.seed);
        tc.freeze = FreezeSpec::BackboneAndNeck;
        state = OptimState::new(tc.adamw());
    }
    tc.validate()?;
    let (train_set, val_set) = load_splits(&a.data)?;
    info!(
        "training {} params on {} images ({} val) for {} epochs",
        model.count_params(),
        train_set.len(),
        val_set.len(),
        tc.epochs
    );

    create_out(&a.out)?;
    let model_cfg_path = a.out.join("model.cfg");
    let train_cfg_path = a.out.join("train.cfg");
    write_text(&model_cfg_path, &model.config().to_kv_string())?;
    write_text(&train_cfg_path, &tc.to_kv_string())?;
    let history_path = a.out.join("history.jsonl");
    let mut history =
        BufWriter::new(File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?);
    let ckpt_dir = a.out.join("checkpoints");
    let mut outputs = vec![model_cfg_path, train_cfg_path, history_path.clone()];

    let result = train::train_with_hook(
        &mut model,
        &train_set,
        &val_set,
        &tc,
        &mut state,
        |rec, model, state, due| {
            let line = rec.to_json_line()?;
            writeln!(history, "{line}")
                .and_then(|_| history.flush())
                .map_err(|e| Error::Io {
                    path: history_path.clone(),
                    source: e,
                })?;
            info!("{line}");
            if due {
                fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io {
                    path: ckpt_dir.clone(),
                    source: e,
                })?;
                let p = ckpt_dir.join(format!("epoch_{:04}.tyrk", rec.epoch));
                save_checkpoint(model, Some(state), &p)?;
                outputs.push(p);
            }
            Ok(())
        },
    );
    drop(history);
    result?;

    let ckpt = a.out.join("checkpoint.tyrk");
    save_checkpoint(&model, Some(&state), &ckpt)?;
    outputs.push(ckpt);

    let mut m = RunManifest::new("train", argv, Some(tc.seed))
        .config("model", model.config().to_kv_string())
        .config("train", tc.to_kv_string())
        .input(&a.data)?;
    for p in [&a.model_config, &a.train_config, &a.init].into_iter().flatten() {
        m = m.input(p)?;
    }
    for o in &outputs {
        m = m.output(o);
    }
    m.write(&a.out)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, _overrides: &Overrides, argv: &[String]) -> Result<()> {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    if let Some(h) = &a.heads {
        let heads = parse_heads(h)?;
        let pan = a.pan_mode.unwrap_or_else(|| minimal_pan(&heads));
        model = model.trim(&heads, pan)?;
    } else if a.pan_mode.is_some() {
        bail!(Error::Config("--pan-mode only applies together with --heads".into()));
    }
    let samples = eval_split(&a.data)?;
    let dets = eval::predict(&model, &samples, a.batch_size, AP_SCORE_FLOOR, DEFAULT_NMS_IOU)?;
    let gts: Vec<_> = samples.iter().map(|s| s.targets.clone()).collect();
    let report = eval::evaluate(&dets, &gts, a.conf, a.iou)?;

    create_out(&a.out)?;
    let (eval_path, pr_path, det_path) = (
        a.out.join("eval.json"),
        a.out.join("pr.csv"),
        a.out.join("detections.csv"),
    );
    write_text(&eval_path, &report.to_json()?)?;
    let mut pr = Vec::new();
    report.write_pr_csv(&mut pr)?;
    fs::write(&pr_path, pr).with_context(|| format!("writing {}", pr_path.display()))?;
    let mut csv = Vec::new();
    detect::write_detections_csv(&mut csv, &dets)?;
    fs::write(&det_path, csv).with_context(|| format!("writing {}", det_path.display()))?;

    let summary = json!({
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "ap50": report.ap50,
        "num_images": report.num_images,
        "num_gt": report.num_gt,
    });
    println!("{summary}");
    info!("evaluated {} images: {summary}", samples.len());

    RunManifest::new("eval", argv, None)
        .config("model", model.config().to_kv_string())
        .input(&a.checkpoint)?
        .input(&a.data)?
        .output(&eval_path)
        .output(&pr_path)
        .output(&det_path)
        .write(&a.out)?;
    Ok(())
}

fn cost(model: &ModelGraph, shape: [usize; 4]) -> Result<serde_json::Value> {
    let flops = model.count_flops(shape)?;
    Ok(json!({
        "flops": flops,
        "gflops": flops as f64 / 1e9,
        "params": model.count_params(),
        "heads": tyrist_core::model::format_heads(&model.heads()),
        "pan_mode": model.config().pan_mode.to_string(),
    }))
}

pub fn trim(a: &TrimArgs, _overrides: &Overrides, argv: &[String]) -> Result<()> {
    let shape = input_size_shape(a.input_size)?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let heads = parse_heads(&a.keep_heads)?;
    let trimmed = model.trim(&heads, a.pan_mode)?;
    let before = cost(&model, shape)?;
    let after = cost(&trimmed, shape)?;
    let (fb, fa) = (model.count_flops(shape)? as f64, trimmed.count_flops(shape)? as f64);
    let (pb, pa) = (model.count_params() as f64, trimmed.count_params() as f64);
    let report = json!({
        "input_size": a.input_size,
        "before": before,
        "after": after,
        "flops_change": fa / fb - 1.0,
        "params_change": pa / pb - 1.0,
    });

    create_out(&a.out)?;
    let ckpt = a.out.join("trimmed.tyrk");
    let report_path = a.out.join("trim.json");
    save_checkpoint(&trimmed, None, &ckpt)?;
    write_text(&report_path, &serde_json::to_string_pretty(&report)?)?;
    println!("{report}");
    info!(
        "trimmed to heads {}: flops {:+.1}%, params {:+.1}%",
        a.keep_heads,
        100.0 * (fa / fb - 1.0),
        100.0 * (pa / pb - 1.0)
    );

    RunManifest::new("trim", argv, None)
        .config("model", trimmed.config().to_kv_string())
        .input(&a.checkpoint)?
        .output(&ckpt)
        .output(&report_path)
        .write(&a.out)?;
    Ok(())
}

pub fn flops(a: &FlopsArgs, overrides: &Overrides, argv: &[String]) -> Result<()> {
    let shape = input_size_shape(a.input_size)?;
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => {
            let kv = resolve_kv(a.model_config.as_deref(), overrides, &ModelConfig::KEYS)?;
            ModelGraph::build(&ModelConfig::from_kv(&kv)?, 0)?
        }
    };
    let mut report = json!({ "input_size": a.input_size, "model": cost(&model, shape)? });
    let mut m = RunManifest::new("flops", argv, None).config("model", model.config().to_kv_string());
    if let Some(p) = &a.compare {
        let other = ModelGraph::build(&ModelConfig::read(p)?, 0)?;
        let ratio = model.count_flops(shape)? as f64 / other.count_flops(shape)? as f64;
        report["compare"] = cost(&other, shape)?;
        report["ratio"] = json!(ratio);
        m = m.config("compare", other.config().to_kv_string()).input(p)?;
    }
    for p in [&a.model_config, &a.checkpoint].into_iter().flatten() {
        m = m.input(p)?;
    }

    create_out(&a.out)?;
    let path = a.out.join("flops.json");
    write_text(&path, &serde_json::to_string_pretty(&report)?)?;
    println!("{report}");
    m.output(&path).write(&a.out)?;
    Ok(())
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{what}: {x:?} is not a number")).into())
        })
        .collect()
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
fn parse_range(s: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--grid: expected start:stop:step, got {s:?}")))?;
    let [start, stop, step] = v[..] else {
        bail!(Error::Config(format!("--grid: expected start:stop:step, got {s:?}")));
    };
    if !(step > 0.0 && stop >= start && step.is_finite() && stop.is_finite() && start.is_finite()) {
        bail!(Error::Config(format!(
            "--grid: need finite start <= stop and step > 0, got {s:?}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

pub fn landscape(a: &LandscapeArgs, _overrides: &Overrides, argv: &[String]) -> Result<()> {
    let g = parse_floats(&a.gt, "--gt")?;
    let [cx, cy, w, h] = g[..] else {
        bail!(Error::Config(format!("--gt: expected cx,cy,w,h, got {:?}", a.gt)));
    };
    let gt = BBox::checked(cx, cy, w, h)?;
    let axis = match (&a.offsets, &a.grid) {
        (Some(o), _) => parse_floats(o, "--offsets")?,
        (None, Some(g)) => parse_range(g)?,
        (None, None) => vec![0.0, 1.0, 2.0, 3.0],
    };
    let offsets = geometry::offset_grid(&axis, &axis);
    let values = geometry::loss_landscape(&gt, &offsets, a.kind)?;

    create_out(&a.out)?;
    let path = a.out.join("landscape.csv");
    let mut csv = Vec::new();
    geometry::write_landscape_csv(&mut csv, &offsets, &values)?;
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {} {} values to {}", values.len(), a.kind, path.display());

    RunManifest::new("landscape", argv, None)
        .config(
            "landscape",
            format!("gt = {}\nkind = {}\noffsets = {}\n", a.gt, a.kind, join(&axis)),
        )
        .output(&path)
        .write(&a.out)?;
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}
