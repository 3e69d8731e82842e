//! Supervised training of the toy desmoker: AdamW with decoupled weight decay,
//! cosine learning-rate decay, and per-step loss logging.
//!
//! Per-sample gradients are computed in parallel but always summed in batch
//! order, so a run is a pure function of its data, config and seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{load_image, load_scalar_field, resize_bilinear, resize_field, Field};
use crate::model::{ModelConfig, ToyModel, TrainPair};
use crate::par;
use crate::synth::Manifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the smoke-map term in the loss.
    pub lambda: f64,
    /// Random horizontal flips of whole training pairs.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 2000,
            batch_size: 4,
            lr_max: 3e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.1,
            flip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("learning rates {}..{} invalid", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments need beta in [0, 1) and eps > 0".into());
        }
        if !(self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return bad("weight decay and lambda must be non-negative".into());
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at the last step.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments plus decoupled weight decay on a masked subset of parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(n: usize, decay_mask: Vec<bool>) -> Self {
        assert_eq!(decay_mask.len(), n, "decay mask length");
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
            let decay = if self.decay_mask[i] { cfg.weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (update + decay);
        }
    }
}

/// Weight tensors decay; biases and the smoke kernel do not.
fn decay_mask(cfg: &ModelConfig) -> Vec<bool> {
    cfg.tensor_shapes()
        .into_iter()
        .flat_map(|(name, shape)| {
            let decays = name.ends_with(".weight") && !name.starts_with("smoke");
            std::iter::repeat_n(decays, shape.iter().product())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_image: f64,
    pub loss_smoke: f64,
    pub loss_total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,loss_image,loss_smoke,loss_total";

pub fn loss_log_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:e},{:.8},{:.8},{:.8}",
            r.step, r.lr, r.loss_image, r.loss_smoke, r.loss_total
        );
    }
    out
}

pub fn write_loss_log(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), loss_log_to_csv(records).as_bytes())
}

/// Mean total loss of the first and last `window` steps. Short logs shrink
/// the window to half their length so the two ends never overlap.
pub fn smoothed_endpoints(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len().div_ceil(2));
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.loss_total).sum::<f64>() / rs.len() as f64;
    Some((mean(&records[..w]), mean(&records[records.len() - w..])))
}

/// Loads every manifest pair at the model resolution, resizing when needed.
pub fn load_pairs(manifest: &Manifest, cfg: &ModelConfig) -> Result<Vec<TrainPair>> {
    let (h, w) = (cfg.height, cfg.width);
    par::try_map_indices(manifest.records.len(), |i| {
        let r = &manifest.records[i];
        let smoky = load_image(manifest.resolve(&r.smoky_path))?;
        let clean = load_image(manifest.resolve(&r.clean_path))?;
        let smoke = load_scalar_field(manifest.resolve(&r.smoke_map_path))?;
        smoky.ensure_same_dims(&clean)?;
        Ok(TrainPair {
            smoky: resize_bilinear(&smoky, h, w)?,
            clean: resize_bilinear(&clean, h, w)?,
            smoke: resize_field(&smoke, h, w)?,
        })
    })
}

fn flip_field<const C: usize>(f: &Field<C>) -> Field<C> {
    let (h, w) = f.dims();
    let src = f.as_slice();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let p = (y * w + x) * C;
            out.extend_from_slice(&src[p..p + C]);
        }
    }
    Field::from_vec_unchecked(h, w, out)
}

fn flipped(pair: &TrainPair) -> TrainPair {
    TrainPair {
        smoky: crate::imaging::Image::from_field_unchecked(flip_field(pair.smoky.field())),
        clean: crate::imaging::Image::from_field_unchecked(flip_field(pair.clean.field())),
        smoke: flip_field(&pair.smoke),
    }
}

/// Trains `model` in place for `cfg.steps` steps and returns the per-step log.
///
/// Batches are drawn from per-epoch permutations of `pairs` and sorted within
/// the batch. A non-finite loss or gradient aborts with [`Error::NonFinite`].
pub fn train(model: &mut ToyModel, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if model.config() != &cfg.model {
        return Err(Error::InvalidParameter("model config differs from training config".into()));
    }
    let batch = cfg.batch_size.min(pairs.len());
    let n_params = model.params().len();
    let mut opt = AdamW::new(n_params, decay_mask(&cfg.model));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        picked.sort_unstable();
        let flips: Vec<bool> = picked
            .iter()
            .map(|_| cfg.flip && rand::Rng::random_bool(&mut rng, 0.5))
            .collect();

        let snapshot = &*model;
        let results = par::try_map_indices(batch, |b| {
            let pair = &pairs[picked[b]];
            if flips[b] {
                snapshot.loss_and_grad(&flipped(pair), cfg.lambda)
            } else {
                snapshot.loss_and_grad(pair, cfg.lambda)
            }
        })?;

        let mut grad = vec![0.0; n_params];
        let (mut li, mut ls, mut lt) = (0.0, 0.0, 0.0);
        for (loss, g) in &results {
            li += loss.image;
            ls += loss.smoke;
            lt += loss.total;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let record = LossRecord {
            step,
            lr: cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min),
            loss_image: li * scale,
            loss_smoke: ls * scale,
            loss_total: lt * scale,
        };
        if !record.loss_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss or gradient at step {step}")));
        }
        opt.step(model.params_mut(), &grad, record.lr, cfg);
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::debug!("step {step}: loss {:.5} lr {:.2e}", record.loss_total, record.lr);
        }
        log.push(record);
    }
    Ok(log)
}

/// Mean loss over `pairs` without updating anything.
pub fn evaluate_loss(model: &ToyModel, pairs: &[TrainPair], lambda: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no evaluation pairs".into()));
    }
    let losses = par::try_map_indices(pairs.len(), |i| model.loss(&pairs[i], lambda))?;
    Ok(losses.iter().map(|l| l.total).sum::<f64>() / pairs.len() as f64)
}
