//! Dark-channel-prior desmoking baseline with guided-filter refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorField, Image, ScalarField};
use crate::par;
use crate::scattering::{invert_scattering_with_floor, AtmosphericLight};

/// Lower bound applied to every estimated airlight channel.
pub const AIRLIGHT_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcpConfig {
    /// Half-width of the dark-channel window (7 → 15×15).
    pub patch_radius: usize,
    /// Fraction of haze removed.
    pub omega: f64,
    pub t_floor: f64,
    /// Fraction of pixels, by dark-channel value, considered for airlight.
    pub airlight_fraction: f64,
    pub guided_radius: usize,
    pub guided_eps: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            patch_radius: 7,
            omega: 0.95,
            t_floor: 0.1,
            airlight_fraction: 0.001,
            guided_radius: 30,
            guided_eps: 1e-3,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::InvalidParameter(format!("omega {} outside (0, 1]", self.omega)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::InvalidParameter(format!("t_floor {} outside (0, 1)", self.t_floor)));
        }
        check_fraction(self.airlight_fraction)?;
        if !(self.guided_eps > 0.0) {
            return Err(Error::InvalidParameter(format!("guided_eps {} must be positive", self.guided_eps)));
        }
        Ok(())
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 0.05) {
        return Err(Error::InvalidParameter(format!(
            "airlight fraction {fraction} outside (0, 0.05]"
        )));
    }
    Ok(())
}

/// Separable running minimum over a `(2r+1)²` window clipped to the image.
fn min_filter(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    par::for_each_row(&mut rows, w, |y, out| {
        let line = &src[y * w..(y + 1) * w];
        for (x, v) in out.iter_mut().enumerate() {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            *v = line[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    });
    let mut out = vec![0.0; h * w];
    par::for_each_row(&mut out, w, |y, line| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for (x, v) in line.iter_mut().enumerate() {
            *v = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    });
    out
}

fn dark_channel_of(field: &ColorField, patch_radius: usize) -> ScalarField {
    let (h, w) = field.dims();
    if h == 0 || w == 0 {
        return ScalarField::zeros(h, w);
    }
    let channel_min: Vec<f64> = field
        .pixels()
        .map(|p| p[0].min(p[1]).min(p[2]))
        .collect();
    ScalarField::from_vec_unchecked(h, w, min_filter(&channel_min, h, w, patch_radius))
}

/// Per-pixel minimum over channels and over the edge-clamped `(2r+1)²` window.
pub fn dark_channel(img: &Image, patch_radius: usize) -> ScalarField {
    dark_channel_of(img.field(), patch_radius)
}

/// Picks the brightest (by channel sum) pixel among the `ceil(fraction·H·W)`
/// pixels with the largest dark-channel values. Ties go to the smaller
/// row-major index, both in candidate selection and in the final pick.
pub fn estimate_atmospheric_light(
    img: &Image,
    dark: &ScalarField,
    fraction: f64,
) -> Result<AtmosphericLight> {
    check_fraction(fraction)?;
    img.ensure_same_dims(dark)?;
    let n = img.pixel_count();
    if n == 0 {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    let count = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let d = dark.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let px = img.as_slice();
    let intensity = |i: usize| px[3 * i] + px[3 * i + 1] + px[3 * i + 2];
    let mut best = order[0];
    for &i in &order[1..count] {
        let (bi, ci) = (intensity(best), intensity(i));
        if ci > bi || (ci == bi && i < best) {
            best = i;
        }
    }
    AtmosphericLight::new([px[3 * best], px[3 * best + 1], px[3 * best + 2]].map(|v| v.max(AIRLIGHT_FLOOR)))
}

/// `t̂ = max(t_floor, 1 − ω · dark_channel(I / A))`.
pub fn estimate_transmission(
    img: &Image,
    a: &AtmosphericLight,
    cfg: &DcpConfig,
) -> Result<ScalarField> {
    cfg.validate()?;
    let a = a.rgb();
    if a.iter().any(|&v| v < AIRLIGHT_FLOOR) {
        return Err(Error::InvalidParameter(format!("airlight {a:?} below {AIRLIGHT_FLOOR}")));
    }
    let normalized = ColorField::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        std::array::from_fn(|c| p[c] / a[c])
    });
    let dark = dark_channel_of(&normalized, cfg.patch_radius);
    Ok(dark.map(|d| (1.0 - cfg.omega * d).clamp(cfg.t_floor, 1.0)))
}

/// Mean over the `(2r+1)²` window clipped to the image, via a summed-area table.
pub(crate) fn box_mean(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut sat = vec![0.0f64; (h + 1) * stride];
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            row_sum += src[y * w + x];
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row_sum;
        }
    }
    let mut out = vec![0.0; h * w];
    par::for_each_row(&mut out, w, |y, line| {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1) + 1;
        for (x, v) in line.iter_mut().enumerate() {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1) + 1;
            let sum = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
                + sat[y0 * stride + x0];
            *v = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    });
    out
}

/// Gray-guided filter of `input` (window radius `r`, regularizer `eps`).
pub fn guided_filter(input: &ScalarField, guide: &ScalarField, r: usize, eps: f64) -> Result<ScalarField> {
    input.ensure_same_dims(guide)?;
    let (h, w) = input.dims();
    if h == 0 || w == 0 {
        return Ok(input.clone());
    }
    let (p, g) = (input.as_slice(), guide.as_slice());
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let gp: Vec<f64> = g.iter().zip(p).map(|(a, b)| a * b).collect();
    let mean_g = box_mean(g, h, w, r);
    let mean_p = box_mean(p, h, w, r);
    let mean_gg = box_mean(&gg, h, w, r);
    let mean_gp = box_mean(&gp, h, w, r);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = mean_gg[i] - mean_g[i] * mean_g[i];
        let cov = mean_gp[i] - mean_g[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_g[i];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    let out = (0..h * w).map(|i| mean_a[i] * g[i] + mean_b[i]).collect();
    Ok(ScalarField::from_vec_unchecked(h, w, out))
}

/// Guided-filter refinement of `t` using the guide's luma, clamped to `[t_floor, 1]`.
pub fn refine_transmission(t: &ScalarField, guide: &Image, cfg: &DcpConfig) -> Result<ScalarField> {
    cfg.validate()?;
    let q = guided_filter(t, &guide.luma(), cfg.guided_radius, cfg.guided_eps)?;
    Ok(q.clamped(cfg.t_floor, 1.0))
}

/// Output of [`dcp_desmoke`].
#[derive(Clone, Debug)]
pub struct DcpResult {
    pub restored: Image,
    pub transmission: ScalarField,
    pub airlight: AtmosphericLight,
}

/// Dark channel → airlight → transmission → guided refinement → inversion.
pub fn dcp_desmoke(img: &Image, cfg: &DcpConfig) -> Result<DcpResult> {
    cfg.validate()?;
    let dark = dark_channel(img, cfg.patch_radius);
    let airlight = estimate_atmospheric_light(img, &dark, cfg.airlight_fraction)?;
    let coarse = estimate_transmission(img, &airlight, cfg)?;
    let transmission = refine_transmission(&coarse, img, cfg)?;
    let restored = invert_scattering_with_floor(img, &transmission, &airlight, cfg.t_floor)?;
    Ok(DcpResult {
        restored,
        transmission,
        airlight,
    })
}
