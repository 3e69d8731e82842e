//! The five subcommands. Each resolves its inputs, records the resolved config
//! next to its outputs, and reports a one-line summary on stdout.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smokebench_core::dcp::dcp_desmoke;
use smokebench_core::imaging::{
    load_image, load_raw_map, load_scalar_field, save_image, save_scalar_field,
};
use smokebench_core::metrics::{self, MetricRecord};
use smokebench_core::model::{desmoke_learned, run_gradient_probe, ProbeConfig, ToyModel};
use smokebench_core::synth::{
    generate_dataset, list_images, oracle_restore, DatasetConfig, Manifest, SmokeParams,
};
use smokebench_core::train::{load_pairs, smoothed_endpoints, train, write_loss_log};
use smokebench_core::{par, ColorField, Error as CoreError, ScalarField};

use crate::config::{
    record_resolved, required, DesmokeSettings, EvalSettings, GlobalSettings, GradcheckSettings,
    Method, SynthSettings, TrainSettings,
};
use crate::{CheckFailed, UsageError};

pub fn synth(global: &GlobalSettings, s: &SynthSettings) -> Result<()> {
    let clean_dir = required(&s.clean_dir, "clean-dir")?;
    let out = required(&s.out, "out")?;
    record_resolved("synth", global, s, Some(out))?;
    let cfg = DatasetConfig {
        clean_dir: clean_dir.to_path_buf(),
        out_dir: out.to_path_buf(),
        count: s.count,
        master_seed: global.seed,
        height: s.height,
        width: s.width,
    };
    let manifest = generate_dataset(&cfg)?;
    println!("wrote {} pairs, manifest {}", s.count, manifest.display());
    Ok(())
}

/// One image to desmoke, with its generation parameters when known.
struct DesmokeItem {
    name: String,
    path: PathBuf,
    params: Option<SmokeParams>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn desmoke_items(s: &DesmokeSettings) -> Result<Vec<DesmokeItem>> {
    if let Some(manifest) = &s.manifest {
        let m = Manifest::read(manifest)?;
        return Ok(m
            .records
            .iter()
            .map(|r| DesmokeItem {
                name: stem(&r.smoky_path),
                path: m.resolve(&r.smoky_path),
                params: Some(r.params.clone()),
            })
            .collect());
    }
    let input = required(&s.input, "input")?;
    let paths = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    Ok(paths
        .into_iter()
        .map(|path| DesmokeItem {
            name: stem(&path),
            path,
            params: None,
        })
        .collect())
}

pub fn desmoke(global: &GlobalSettings, s: &DesmokeSettings) -> Result<()> {
    let out = required(&s.out, "out")?;
    let model = match s.method {
        Method::Learned => {
            let ckpt = s
                .checkpoint
                .as_deref()
                .ok_or_else(|| UsageError("method learned needs --checkpoint".into()))?;
            Some(ToyModel::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?)
        }
        _ => None,
    };
    if s.method == Method::InvertOracle && s.manifest.is_none() {
        return Err(UsageError("method invert-oracle needs --manifest with generation parameters".into()).into());
    }
    if s.method == Method::Dcp {
        s.dcp.validate()?;
    }
    record_resolved("desmoke", global, s, Some(out))?;
    let items = desmoke_items(s)?;
    par::try_map_indices(items.len(), |i| -> Result<()> {
        let item = &items[i];
        let img = load_image(&item.path)?;
        let (restored, smoke) = match s.method {
            Method::Dcp => {
                let r = dcp_desmoke(&img, &s.dcp)?;
                (r.restored, Some(r.transmission.map(|t| 1.0 - t)))
            }
            Method::Learned => {
                let (j, s) = desmoke_learned(model.as_ref().expect("checked above"), &img)?;
                (j, Some(s.clamped(0.0, 1.0)))
            }
            Method::InvertOracle => {
                let params = item.params.as_ref().expect("manifest items carry parameters");
                (oracle_restore(&img, params)?, None)
            }
        };
        save_image(restored.field(), out.join(format!("{}.png", item.name)))?;
        if let Some(smoke) = smoke {
            save_scalar_field(&smoke, out.join(format!("{}_smoke.png", item.name)))?;
        }
        Ok(())
    })
    .map_err(|e| e.context("desmoking"))?;
    println!("desmoked {} images with {:?} into {}", items.len(), s.method, out.display());
    Ok(())
}

/// One row of an evaluation manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: PathBuf,
    pub reference: PathBuf,
    /// 16-bit depth maps in millimetres; zero marks missing ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_mask: Option<PathBuf>,
    /// 8-bit masks with values 0 or 255.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn eval_records(s: &EvalSettings) -> Result<Vec<EvalRecord>> {
    let manifest = required(&s.manifest, "manifest")?;
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(pred_dir) = &s.pred_dir {
        let m = Manifest::read(manifest)?;
        let pred_dir = std::path::absolute(pred_dir).context("resolving --pred-dir")?;
        return Ok(m
            .records
            .iter()
            .map(|r| {
                let id = stem(&r.smoky_path);
                EvalRecord {
                    prediction: pred_dir.join(format!("{id}.png")),
                    reference: m.resolve(&r.clean_path),
                    id,
                    pred_depth: None,
                    gt_depth: None,
                    depth_mask: None,
                    pred_mask: None,
                    gt_mask: None,
                }
            })
            .collect());
    }
    let text = std::fs::read_to_string(manifest).map_err(|e| CoreError::Io {
        path: manifest.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut r: EvalRecord = serde_json::from_str(line)
                .map_err(|e| CoreError::Data(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
            for p in [&mut r.prediction, &mut r.reference] {
                *p = resolve(&root, p);
            }
            for p in [&mut r.pred_depth, &mut r.gt_depth, &mut r.depth_mask, &mut r.pred_mask, &mut r.gt_mask]
                .into_iter()
                .flatten()
            {
                *p = resolve(&root, p);
            }
            Ok(r)
        })
        .collect()
}

fn load_mask(path: &Path) -> Result<ScalarField> {
    let m = load_scalar_field(path)?;
    if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        bail!(CoreError::Data(format!("{}: masks must contain only 0 and 255", path.display())));
    }
    Ok(m)
}

fn score(r: &EvalRecord) -> Result<(MetricRecord, ColorField, ColorField)> {
    if !r.prediction.exists() {
        bail!(CoreError::Data(format!(
            "record {}: prediction {} does not exist",
            r.id,
            r.prediction.display()
        )));
    }
    let pred = load_image(&r.prediction)?;
    let reference = load_image(&r.reference)?;
    pred.ensure_same_dims(&reference)?;
    let depth_mae = match (&r.pred_depth, &r.gt_depth) {
        (Some(p), Some(g)) => {
            let mask = r.depth_mask.as_deref().map(load_mask).transpose()?;
            Some(metrics::mae_depth(&load_raw_map(p)?, &load_raw_map(g)?, mask.as_ref())?)
        }
        (None, None) => None,
        _ => bail!(CoreError::Data("pred_depth and gt_depth must be given together".into())),
    };
    let iou = match (&r.pred_mask, &r.gt_mask) {
        (Some(p), Some(g)) => Some(metrics::iou(&load_mask(p)?, &load_mask(g)?)?),
        (None, None) => None,
        _ => bail!(CoreError::Data("pred_mask and gt_mask must be given together".into())),
    };
    let record = MetricRecord {
        id: r.id.clone(),
        psnr: metrics::psnr(pred.field(), reference.field())?,
        ssim: metrics::ssim(pred.field(), reference.field())?,
        depth_mae,
        iou,
    };
    Ok((record, pred.into_field(), reference.into_field()))
}

/// Prediction | reference | absolute difference, side by side.
pub fn comparison_strip(pred: &ColorField, reference: &ColorField) -> ColorField {
    let (h, w) = pred.dims();
    ColorField::from_fn(h, 3 * w, |y, x| {
        let (p, r) = (pred.pixel(y, x % w), reference.pixel(y, x % w));
        match x / w {
            0 => p,
            1 => r,
            _ => std::array::from_fn(|c| (p[c] - r[c]).abs()),
        }
    })
}

pub fn eval(global: &GlobalSettings, s: &EvalSettings) -> Result<()> {
    let out = required(&s.out, "out")?;
    let records = eval_records(s)?;
    if records.is_empty() {
        bail!(CoreError::Data("evaluation manifest is empty".into()));
    }
    record_resolved("eval", global, s, Some(out))?;
    let strips_dir = out.join("strips");
    let scored = par::try_map_indices(records.len(), |i| -> Result<MetricRecord> {
        let r = &records[i];
        let (m, pred, reference) = score(r).with_context(|| format!("record {}", r.id))?;
        if s.strips {
            save_image(&comparison_strip(&pred, &reference), strips_dir.join(format!("{}.png", r.id)))?;
        }
        Ok(m)
    })?;
    let report = metrics::aggregate(&scored)?;
    metrics::write_records_csv(&scored, out.join("metrics.csv"))?;
    metrics::write_report_json(&report, out.join("report.json"))?;
    println!("items {}", report.count);
    println!("SSIM  {}", report.ssim.formatted);
    println!("PSNR  {}", report.psnr.formatted);
    if let Some(d) = &report.depth_mae {
        println!("depth MAE {}", d.formatted);
    }
    if let Some(i) = &report.iou {
        println!("IoU   {}", i.formatted);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProbeReport {
    seed: u64,
    max_rel_error: f64,
    worst_index: usize,
    sweep: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    step: f64,
    tolerance: f64,
    passed: bool,
    probes: Vec<ProbeReport>,
}

pub fn gradcheck(global: &GlobalSettings, s: &GradcheckSettings) -> Result<()> {
    if s.probes == 0 {
        return Err(UsageError("--probes must be positive".into()).into());
    }
    record_resolved("gradcheck", global, s, s.out.as_deref())?;
    let cfg = ProbeConfig {
        model: s.model.clone(),
        lambda: s.lambda,
        coords_per_tensor: s.coords_per_tensor,
        gradient_scale: if s.corrupt { 1.01 } else { 1.0 },
    };
    let probes = par::try_map_indices(s.probes, |i| -> Result<ProbeReport> {
        let seed = global.seed.wrapping_add(i as u64);
        let check = run_gradient_probe(&cfg, seed, s.step)?;
        let sweep = s
            .sweep
            .iter()
            .map(|&h| Ok((h, run_gradient_probe(&cfg, seed, h)?.max_rel_error)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeReport {
            seed,
            max_rel_error: check.max_rel_error,
            worst_index: check.worst_index,
            sweep,
        })
    })?;
    for p in &probes {
        println!("probe seed {}: max rel error {:.3e} (param {})", p.seed, p.max_rel_error, p.worst_index);
        for (h, e) in &p.sweep {
            log::info!("probe seed {} step {h:e}: {e:.3e}", p.seed);
        }
    }
    let passed = probes.iter().all(|p| p.max_rel_error < s.tolerance);
    let worst = probes.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    if let Some(out) = &s.out {
        let report = GradcheckReport {
            step: s.step,
            tolerance: s.tolerance,
            passed,
            probes,
        };
        let text = serde_json::to_string_pretty(&report).context("encoding gradcheck report")?;
        smokebench_core::write_atomic(&out.join("gradcheck.json"), text.as_bytes())?;
    }
    if passed {
        println!("PASS: worst {worst:.3e} < {:e}", s.tolerance);
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed: worst {worst:.3e} >= {:e}", s.tolerance)).into())
    }
}

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOSS_LOG_NAME: &str = "loss.csv";

pub fn train_toy(global: &GlobalSettings, s: &TrainSettings) -> Result<()> {
    let manifest_path = required(&s.manifest, "manifest")?;
    let out = required(&s.out, "out")?;
    let cfg = s.train_config(global.seed);
    cfg.validate()?;
    record_resolved("train-toy", global, s, Some(out))?;
    let manifest = Manifest::read(manifest_path)?;
    if manifest.records.len() < 2 {
        bail!(CoreError::Data(format!(
            "{} has {} pairs; training needs at least 2",
            manifest_path.display(),
            manifest.records.len()
        )));
    }
    let pairs = load_pairs(&manifest, &cfg.model)?;
    let mut model = ToyModel::new(cfg.model.clone(), global.seed)?;
    let log = train(&mut model, &pairs, &cfg).context("training")?;
    model.save(out.join(CHECKPOINT_NAME))?;
    write_loss_log(&log, out.join(LOSS_LOG_NAME))?;
    match smoothed_endpoints(&log, 100) {
        Some((first, last)) => println!(
            "trained {} steps on {} pairs: loss {first:.5} -> {last:.5}",
            log.len(),
            pairs.len()
        ),
        None => println!("0 steps: wrote initial checkpoint"),
    }
    Ok(())
}
