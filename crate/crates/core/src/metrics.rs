//! Restoration and downstream-task metrics with mean ± std aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{ColorField, ScalarField};
use crate::par;

/// Returned when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR in dB for data in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ColorField, b: &ColorField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if a.pixel_count() == 0 {
        return Err(Error::Data("PSNR of empty images".into()));
    }
    let n = a.as_slice().len() as f64;
    let mse = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering of a single-channel `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut horiz = vec![0.0; h * ow];
    par::for_each_row(&mut horiz, ow, |y, row| {
        let src = &plane[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            *out = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    });
    let mut out = vec![0.0; oh * ow];
    par::for_each_row(&mut out, ow, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = taps.iter().enumerate().map(|(i, t)| t * horiz[(y + i) * ow + x]).sum();
        }
    });
    out
}

fn channel_plane(f: &ColorField, c: usize) -> Vec<f64> {
    f.pixels().map(|p| p[c]).collect()
}

/// Mean SSIM over the valid region of an 11×11 Gaussian window (σ = 1.5),
/// averaged over the three channels. Images smaller than the window are an
/// error.
pub fn ssim(a: &ColorField, b: &ColorField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let syy = filter_valid(&prod(&y, &y), h, w, &taps);
        let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

fn ensure_binary(mask: &ScalarField, what: &str) -> Result<()> {
    if mask.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("{what} must contain only 0 and 1")));
    }
    Ok(())
}

/// Mean absolute depth error over pixels where the binary mask is 1; without a
/// mask every pixel counts. An empty mask is an error.
pub fn mae_depth(pred: &ScalarField, gt: &ScalarField, mask: Option<&ScalarField>) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    if let Some(m) = mask {
        m.ensure_same_dims(gt)?;
        ensure_binary(m, "depth mask")?;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.as_slice().len() {
        if mask.is_none_or(|m| m.as_slice()[i] == 1.0) {
            sum += (pred.as_slice()[i] - gt.as_slice()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("depth mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Intersection over union of binary (0/1) masks. Two empty masks agree
/// perfectly.
pub fn iou(pred: &ScalarField, gt: &ScalarField) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    ensure_binary(pred, "predicted mask")?;
    ensure_binary(gt, "ground-truth mask")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (p, g) = (*p == 1.0, *g == 1.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Metrics of one evaluated item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for one value.
    pub std: f64,
    pub count: usize,
    /// `"mean ± std"` with two decimals.
    pub formatted: String,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
            formatted: format!("{mean:.2} ± {std:.2}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    /// Always `"sample"`: standard deviations use the `n − 1` denominator.
    pub std_convention: String,
    pub psnr: Summary,
    pub ssim: Summary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth_mae: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<Summary>,
}

/// Summarizes a batch of records. Optional metrics are summarized over the
/// records that carry them.
pub fn aggregate(records: &[MetricRecord]) -> Result<MetricReport> {
    let psnr: Vec<f64> = records.iter().map(|r| r.psnr).collect();
    let ssim: Vec<f64> = records.iter().map(|r| r.ssim).collect();
    let depth: Vec<f64> = records.iter().filter_map(|r| r.depth_mae).collect();
    let iou: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();
    let psnr = Summary::of(&psnr).ok_or_else(|| Error::Data("no metric records".into()))?;
    Ok(MetricReport {
        count: records.len(),
        std_convention: "sample".into(),
        psnr,
        ssim: Summary::of(&ssim).expect("same length as psnr"),
        depth_mae: Summary::of(&depth),
        iou: Summary::of(&iou),
    })
}

pub const METRICS_CSV_HEADER: &str = "id,psnr,ssim,depth_mae,iou";

pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.id,
            r.psnr,
            r.ssim,
            opt(r.depth_mae),
            opt(r.iou)
        );
    }
    out
}

pub fn write_records_csv(records: &[MetricRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), records_to_csv(records).as_bytes())
}

pub fn write_report_json(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report encoding: {e}")))?;
    write_atomic(path.as_ref(), text.as_bytes())
}
