//! Desk-scale convolutional encoder–decoder regressing the head's `[K, B]`
//! output, with a hand-written backward pass and a binary checkpoint format.
//!
//! Layout (all 3×3 convolutions, edge-replicated borders, SiLU between layers):
//!
//! ```text
//! x (3, H, W) ─ enc1 → a1 (c1, H, W) ─ enc2/2 → a2 (c2, H/2, W/2) ─ enc3/2 → a3 (c2, H/4, W/4)
//! [up(a3), a2, mean(a3)] ─ dec1 → a4 (c3, H/2, W/2)
//! [up(a4), a1, x] ─ dec2 → raw O (4, H, W) → head
//! ```
//!
//! `mean(a3)` is the per-channel spatial mean of `a3` broadcast over the grid:
//! smoke color and overall density are image-wide, which a 3×3 stack only sees
//! locally.

use std::io::{Cursor, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::head::{
    self, head_backward, head_forward, identity_k_raw, loss_l1, loss_l1_grad, Differentiable,
    GradCheck, HeadForward, HeadOutput, LossValue, SmokeKernel,
};
use crate::imaging::{resize_bilinear, resize_field, ColorField, Field, Image, ScalarField};
use crate::nn::{silu, silu_grad, upsample2, upsample2_backward, ConvGeom};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Nominal input height; must be a multiple of 4.
    pub height: usize,
    /// Nominal input width; must be a multiple of 4.
    pub width: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub dec: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 80,
            enc1: 8,
            enc2: 16,
            dec: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width)?;
        if self.enc1 == 0 || self.enc2 == 0 || self.dec == 0 {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c1, c2, c3) = (self.enc1, self.enc2, self.dec);
        vec![
            ("enc1.weight", vec![c1, 3, 3, 3]),
            ("enc1.bias", vec![c1]),
            ("enc2.weight", vec![c2, c1, 3, 3]),
            ("enc2.bias", vec![c2]),
            ("enc3.weight", vec![c2, c2, 3, 3]),
            ("enc3.bias", vec![c2]),
            ("dec1.weight", vec![c3, 3 * c2, 3, 3]),
            ("dec1.bias", vec![c3]),
            ("dec2.weight", vec![4, c3 + c1 + 3, 3, 3]),
            ("dec2.bias", vec![4]),
            ("smoke.weight", vec![1, 3, 3, 3]),
            ("smoke.bias", vec![1]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn offsets(&self) -> [usize; 13] {
        let mut out = [0; 13];
        for (i, (_, s)) in self.tensor_shapes().iter().enumerate() {
            out[i + 1] = out[i] + s.iter().product::<usize>();
        }
        out
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::InvalidParameter(format!(
            "model resolution {h}x{w} must be positive multiples of 4"
        )));
    }
    Ok(())
}

// Tensor indices into the layout.
const ENC1: usize = 0;
const ENC2: usize = 2;
const ENC3: usize = 4;
const DEC1: usize = 6;
const DEC2: usize = 8;
const SMOKE: usize = 10;

struct Geoms {
    g1: ConvGeom,
    g2: ConvGeom,
    g3: ConvGeom,
    g4: ConvGeom,
    g5: ConvGeom,
}

impl Geoms {
    fn new(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        let (c1, c2, c3) = (cfg.enc1, cfg.enc2, cfg.dec);
        Self {
            g1: ConvGeom { cin: 3, cout: c1, h, w, stride: 1 },
            g2: ConvGeom { cin: c1, cout: c2, h, w, stride: 2 },
            g3: ConvGeom { cin: c2, cout: c2, h: h / 2, w: w / 2, stride: 2 },
            g4: ConvGeom { cin: 3 * c2, cout: c3, h: h / 2, w: w / 2, stride: 1 },
            g5: ConvGeom { cin: c3 + c1 + 3, cout: 4, h, w, stride: 1 },
        }
    }
}

/// Everything the backward pass needs from a forward evaluation.
struct Trace {
    cols: [Vec<f64>; 5],
    z: [Vec<f64>; 4],
    raw: Vec<f64>,
    head: HeadOutput,
    fwd: HeadForward,
}

/// Mutable views of the adjacent weight and bias tensors starting at `i`.
fn weight_and_bias<'g>(grad: &'g mut [f64], o: &[usize; 13], i: usize) -> (&'g mut [f64], &'g mut [f64]) {
    grad[o[i]..o[i + 2]].split_at_mut(o[i + 1] - o[i])
}

struct Params<'a> {
    cfg: &'a ModelConfig,
    data: &'a [f64],
    offsets: [usize; 13],
}

impl<'a> Params<'a> {
    fn new(cfg: &'a ModelConfig, data: &'a [f64]) -> Self {
        Self {
            cfg,
            data,
            offsets: cfg.offsets(),
        }
    }

    fn tensor(&self, i: usize) -> &'a [f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    fn kernel(&self) -> SmokeKernel {
        let mut weights = [0.0; 27];
        weights.copy_from_slice(self.tensor(SMOKE));
        SmokeKernel {
            weights,
            bias: self.tensor(SMOKE + 1)[0],
        }
    }

    fn forward(&self, input: &ColorField) -> Result<Trace> {
        let (h, w) = input.dims();
        check_dims(h, w)?;
        let g = Geoms::new(self.cfg, h, w);
        let p1 = h * w;
        let mut x0 = vec![0.0; 3 * p1];
        for (p, px) in input.pixels().enumerate() {
            for c in 0..3 {
                x0[c * p1 + p] = px[c];
            }
        }
        let act = |z: &[f64]| z.iter().map(|&v| silu(v)).collect::<Vec<_>>();

        let cols1 = g.g1.im2col(&x0);
        let z1 = g.g1.forward(self.tensor(ENC1), self.tensor(ENC1 + 1), &cols1);
        let a1 = act(&z1);
        let cols2 = g.g2.im2col(&a1);
        let z2 = g.g2.forward(self.tensor(ENC2), self.tensor(ENC2 + 1), &cols2);
        let a2 = act(&z2);
        let cols3 = g.g3.im2col(&a2);
        let z3 = g.g3.forward(self.tensor(ENC3), self.tensor(ENC3 + 1), &cols3);
        let a3 = act(&z3);

        let mut cat1 = upsample2(&a3, g.g3.cout, g.g3.out_h(), g.g3.out_w());
        cat1.extend_from_slice(&a2);
        let p2 = g.g4.out_len();
        for plane in a3.chunks(g.g3.out_len()) {
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            cat1.extend(std::iter::repeat_n(mean, p2));
        }
        let cols4 = g.g4.im2col(&cat1);
        let z4 = g.g4.forward(self.tensor(DEC1), self.tensor(DEC1 + 1), &cols4);
        let a4 = act(&z4);

        let mut cat2 = upsample2(&a4, g.g4.cout, g.g4.out_h(), g.g4.out_w());
        cat2.extend_from_slice(&a1);
        cat2.extend_from_slice(&x0);
        let cols5 = g.g5.im2col(&cat2);
        let raw = g.g5.forward(self.tensor(DEC2), self.tensor(DEC2 + 1), &cols5);

        let mut hwc = vec![0.0; 4 * p1];
        for p in 0..p1 {
            for c in 0..4 {
                hwc[4 * p + c] = raw[c * p1 + p];
            }
        }
        let head = HeadOutput::from_raw(&Field::<4>::new(h, w, hwc)?, self.kernel())?;
        let fwd = head_forward(input, &head)?;
        Ok(Trace {
            cols: [cols1, cols2, cols3, cols4, cols5],
            z: [z1, z2, z3, z4],
            raw,
            head,
            fwd,
        })
    }

    fn backward(&self, input: &ColorField, trace: &Trace, dj: &[f64], ds: &[f64]) -> Vec<f64> {
        let (h, w) = input.dims();
        let g = Geoms::new(self.cfg, h, w);
        let p1 = h * w;
        let p2 = g.g2.out_len();
        let (c1, c2, c3) = (self.cfg.enc1, self.cfg.enc2, self.cfg.dec);
        let mut grad = vec![0.0; self.data.len()];
        let o = self.offsets;
        let hg = head_backward(input, &trace.head, &trace.fwd, dj, ds);
        let mut draw = vec![0.0; 4 * p1];
        for p in 0..p1 {
            draw[p] = hg.dk[p] * head::sigmoid(trace.raw[p]);
            for c in 0..3 {
                draw[(c + 1) * p1 + p] = hg.db[3 * p + c];
            }
        }

        let (dw, db) = weight_and_bias(&mut grad, &o, DEC2);
        let dcols5 = g.g5.backward(self.tensor(DEC2), &trace.cols[4], &draw, dw, db, true).unwrap();
        let mut dcat2 = vec![0.0; g.g5.cin * p1];
        g.g5.col2im_add(&dcols5, &mut dcat2);
        let mut da1 = dcat2[c3 * p1..(c3 + c1) * p1].to_vec();
        let da4 = upsample2_backward(&dcat2[..c3 * p1], c3, g.g4.out_h(), g.g4.out_w());

        let dz4: Vec<f64> = da4.iter().zip(&trace.z[3]).map(|(d, &z)| d * silu_grad(z)).collect();
        let (dw, db) = weight_and_bias(&mut grad, &o, DEC1);
        let dcols4 = g.g4.backward(self.tensor(DEC1), &trace.cols[3], &dz4, dw, db, true).unwrap();
        let mut dcat1 = vec![0.0; g.g4.cin * p2];
        g.g4.col2im_add(&dcols4, &mut dcat1);
        let mut da2 = dcat1[c2 * p2..2 * c2 * p2].to_vec();
        let mut da3 = upsample2_backward(&dcat1[..c2 * p2], c2, g.g3.out_h(), g.g3.out_w());
        let p3 = g.g3.out_len();
        for (c, plane) in da3.chunks_mut(p3).enumerate() {
            let dmean = dcat1[(2 * c2 + c) * p2..(2 * c2 + c + 1) * p2].iter().sum::<f64>() / p3 as f64;
            plane.iter_mut().for_each(|v| *v += dmean);
        }

        let dz3: Vec<f64> = da3.iter().zip(&trace.z[2]).map(|(d, &z)| d * silu_grad(z)).collect();
        let (dw, db) = weight_and_bias(&mut grad, &o, ENC3);
        let dcols3 = g.g3.backward(self.tensor(ENC3), &trace.cols[2], &dz3, dw, db, true).unwrap();
        g.g3.col2im_add(&dcols3, &mut da2);

        let dz2: Vec<f64> = da2.iter().zip(&trace.z[1]).map(|(d, &z)| d * silu_grad(z)).collect();
        let (dw, db) = weight_and_bias(&mut grad, &o, ENC2);
        let dcols2 = g.g2.backward(self.tensor(ENC2), &trace.cols[1], &dz2, dw, db, true).unwrap();
        g.g2.col2im_add(&dcols2, &mut da1);

        let dz1: Vec<f64> = da1.iter().zip(&trace.z[0]).map(|(d, &z)| d * silu_grad(z)).collect();
        let (dw, db) = weight_and_bias(&mut grad, &o, ENC1);
        g.g1.backward(self.tensor(ENC1), &trace.cols[0], &dz1, dw, db, false);

        grad[o[SMOKE]..o[SMOKE + 1]].copy_from_slice(&hg.dkernel.weights);
        grad[o[SMOKE + 1]] = hg.dkernel.bias;
        grad
    }
}

/// A trained (or freshly initialized) toy desmoker.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    params: Vec<f64>,
}

/// One supervised example at model resolution.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub smoky: Image,
    pub clean: Image,
    pub smoke: ScalarField,
}

impl ToyModel {
    /// Identity-biased initialization: hidden layers get Kaiming-uniform
    /// weights, the output layer starts near zero with `K ≈ 0`, `B ≈ 0`, and the
    /// smoke kernel starts as a uniform average.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::initialize(config, seed, false)
    }

    /// Fully random parameters (non-trivial output layer and smoke kernel),
    /// used for gradient probes.
    pub fn randomized(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::initialize(config, seed, true)
    }

    fn initialize(config: ModelConfig, seed: u64, randomize_head: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(config.param_count());
        for (name, shape) in config.tensor_shapes() {
            let len: usize = shape.iter().product();
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut draw = |scale: f64| -> Vec<f64> {
                (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
            };
            let values = match name {
                "dec2.weight" if randomize_head => draw(0.3 * bound),
                "dec2.weight" => draw(1e-3),
                "dec2.bias" => {
                    let mut b = vec![identity_k_raw(), 0.0, 0.0, 0.0];
                    if randomize_head {
                        b.iter_mut().zip(draw(0.2)).for_each(|(v, d)| *v += d);
                    }
                    b
                }
                "smoke.weight" if randomize_head => draw(0.2).into_iter().map(|v| v + 1.0 / 27.0).collect(),
                "smoke.weight" => vec![1.0 / 27.0; 27],
                "smoke.bias" if randomize_head => draw(0.1),
                "smoke.bias" => vec![0.0],
                n if n.ends_with(".bias") && randomize_head => draw(0.1),
                n if n.ends_with(".bias") => vec![0.0; len],
                _ => draw(bound),
            };
            params.extend(values);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a model that needs {}",
                params.len(),
                config.param_count()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Raw forward at the input's own resolution (must be a multiple of 4):
    /// returns the unclamped `J` and the smoke map.
    pub fn forward(&self, input: &ColorField) -> Result<HeadForward> {
        Ok(Params::new(&self.config, &self.params).forward(input)?.fwd)
    }

    /// Loss against one example and its gradient with respect to all parameters.
    pub fn loss_and_grad(&self, pair: &TrainPair, lambda: f64) -> Result<(LossValue, Vec<f64>)> {
        loss_and_grad_at(&self.config, &self.params, pair.smoky.field(), pair.clean.field(), &pair.smoke, lambda)
    }

    pub fn loss(&self, pair: &TrainPair, lambda: f64) -> Result<LossValue> {
        let fwd = self.forward(pair.smoky.field())?;
        loss_l1(pair.clean.field(), &fwd.j, &pair.smoke, &fwd.s, lambda)
    }
}

fn loss_and_grad_at(
    cfg: &ModelConfig,
    params: &[f64],
    input: &ColorField,
    j_gt: &ColorField,
    s_gt: &ScalarField,
    lambda: f64,
) -> Result<(LossValue, Vec<f64>)> {
    let p = Params::new(cfg, params);
    let trace = p.forward(input)?;
    let loss = loss_l1(j_gt, &trace.fwd.j, s_gt, &trace.fwd.s, lambda)?;
    let (dj, ds) = loss_l1_grad(j_gt, &trace.fwd.j, s_gt, &trace.fwd.s, lambda);
    Ok((loss, p.backward(input, &trace, &dj, &ds)))
}

/// Runs the model on an image of any size: inputs that differ from the model
/// resolution are resized in and the outputs resized back, with a warning.
/// `J` is clamped to `[0, 1]`; `S` is returned as predicted.
pub fn desmoke_learned(model: &ToyModel, img: &Image) -> Result<(Image, ScalarField)> {
    let (mh, mw) = (model.config.height, model.config.width);
    let (h, w) = img.dims();
    if (h, w) == (mh, mw) {
        let fwd = model.forward(img.field())?;
        return Ok((fwd.j.to_image(), fwd.s));
    }
    log::warn!("input {h}x{w} differs from model resolution {mh}x{mw}; resizing");
    let resized = resize_bilinear(img, mh, mw)?;
    let fwd = model.forward(resized.field())?;
    let j = resize_field(&fwd.j, h, w)?.to_image();
    let s = resize_field(&fwd.s, h, w)?;
    Ok((j, s))
}

/// Loss of a fixed example as a function of the flat parameter vector.
pub struct ModelObjective {
    pub config: ModelConfig,
    pub input: ColorField,
    pub j_gt: ColorField,
    pub s_gt: ScalarField,
    pub lambda: f64,
    /// Multiplies the analytic gradient; `1.0` leaves it intact. Anything else
    /// is a negative control for the checker.
    pub gradient_scale: f64,
}

impl Differentiable for ModelObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let fwd = Params::new(&self.config, x).forward(&self.input)?.fwd;
        Ok(loss_l1(&self.j_gt, &fwd.j, &self.s_gt, &fwd.s, self.lambda)?.total)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, mut g) = loss_and_grad_at(&self.config, x, &self.input, &self.j_gt, &self.s_gt, self.lambda)?;
        if self.gradient_scale != 1.0 {
            g.iter_mut().for_each(|v| *v *= self.gradient_scale);
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    /// Coordinates checked per parameter tensor.
    pub coords_per_tensor: usize,
    pub gradient_scale: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                height: 16,
                width: 20,
                ..ModelConfig::default()
            },
            lambda: 0.1,
            coords_per_tensor: 4,
            gradient_scale: 1.0,
        }
    }
}

/// Builds a randomized gradient probe: random parameters, a synthetic smoky
/// input, and targets displaced from the current prediction by at least 0.05
/// so no `|·|` term sits near its kink.
pub fn gradient_probe(cfg: &ProbeConfig, seed: u64) -> Result<(ModelObjective, Vec<f64>, Vec<usize>)> {
    let (h, w) = (cfg.model.height, cfg.model.width);
    let model = ToyModel::randomized(cfg.model.clone(), seed)?;
    let clean = crate::scene::tissue_scene(h.max(8), w.max(8), seed);
    let clean = resize_bilinear(&clean, h, w)?;
    let mut params = crate::synth::randomize_params(seed, 0);
    params.density = params.density.max(0.3);
    let alpha = crate::synth::gen_smoke_map(h.max(8), w.max(8), &params)?;
    let alpha = resize_field(&alpha, h, w)?.clamped(0.0, 1.0);
    let (smoky, _) = crate::synth::composite_smoke(&clean, &alpha, &params)?;

    let fwd = model.forward(smoky.field())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
    let mut displace = |f: &[f64]| -> Vec<f64> {
        f.iter()
            .map(|&v| {
                let mag = 0.05 + 0.1 * rng.random::<f64>();
                if rng.random_bool(0.5) { v + mag } else { v - mag }
            })
            .collect()
    };
    let j_gt = ColorField::new(h, w, displace(fwd.j.as_slice()))?;
    let s_gt = ScalarField::new(h, w, displace(fwd.s.as_slice()))?;

    let offsets = cfg.model.offsets();
    let mut coords = Vec::new();
    for t in 0..12 {
        let len = offsets[t + 1] - offsets[t];
        let take = cfg.coords_per_tensor.min(len);
        let mut picked: Vec<usize> = Vec::with_capacity(take);
        while picked.len() < take {
            let i = offsets[t] + rng.random_range(0..len);
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        coords.extend(picked);
    }
    let objective = ModelObjective {
        config: cfg.model.clone(),
        input: smoky.into_field(),
        j_gt,
        s_gt,
        lambda: cfg.lambda,
        gradient_scale: cfg.gradient_scale,
    };
    Ok((objective, model.params, coords))
}

/// Runs one randomized probe at finite-difference `step`.
pub fn run_gradient_probe(cfg: &ProbeConfig, seed: u64, step: f64) -> Result<GradCheck> {
    let (objective, x, coords) = gradient_probe(cfg, seed)?;
    head::grad_check_coords(&objective, &x, step, &coords)
}

const MAGIC: &[u8; 8] = b"SMKBTOY\0";
const FORMAT_VERSION: u32 = 1;

impl ToyModel {
    /// Binary checkpoint: 8-byte magic, format version, model config, then each
    /// tensor as `name, shape, little-endian f64 data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.height, c.width, c.enc1, c.enc2, c.dec] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let shapes = c.tensor_shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        let offsets = c.offsets();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.params[offsets[i]..offsets[i + 1]] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let bad = |what: &str| Error::Data(format!("checkpoint: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |r: &mut Cursor<&[u8]>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_at(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = u32_at(&mut r)? as usize;
        }
        let config = ModelConfig {
            height: dims[0],
            width: dims[1],
            enc1: dims[2],
            enc2: dims[3],
            dec: dims[4],
        };
        config.validate()?;
        let shapes = config.tensor_shapes();
        if u32_at(&mut r)? as usize != shapes.len() {
            return Err(bad("tensor count mismatch"));
        }
        let mut params = Vec::with_capacity(config.param_count());
        for (name, shape) in shapes {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
            let mut stored = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut stored).map_err(|_| bad("truncated"))?;
            if stored != name.as_bytes() {
                return Err(bad(&format!("expected tensor {name}")));
            }
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd).map_err(|_| bad("truncated"))?;
            let mut stored_shape = Vec::with_capacity(nd[0] as usize);
            for _ in 0..nd[0] {
                stored_shape.push(u32_at(&mut r)? as usize);
            }
            if stored_shape != shape {
                return Err(bad(&format!("{name} has shape {stored_shape:?}, expected {shape:?}")));
            }
            for _ in 0..shape.iter().product::<usize>() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                params.push(f64::from_le_bytes(b));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
