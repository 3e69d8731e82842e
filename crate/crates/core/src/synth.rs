//! Procedural smoke maps, alpha compositing with channel correction and
//! illumination enhancement, randomized parameters, and paired-dataset generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{self, ColorField, Image, ScalarField};
use crate::noise::{fractal_noise, splitmix_stream};
use crate::par;
use crate::scattering::{invert_scattering, AtmosphericLight};

pub const DENSITY_RANGE: (f64, f64) = (0.0, 1.0);
pub const COLOR_RANGE: (f64, f64) = (0.7, 1.0);
pub const OCTAVE_RANGE: (u32, u32) = (3, 6);
pub const BASE_SCALE_RANGE: (f64, f64) = (16.0, 160.0);
pub const GAMMA_RANGE: (f64, f64) = (0.8, 1.2);
pub const GAIN_RANGE: (f64, f64) = (0.9, 1.1);

/// Default output resolution `(height, width)`.
pub const DEFAULT_RESOLUTION: (usize, usize) = (512, 640);

/// Randomized synthesis parameters for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeParams {
    pub seed: u64,
    /// Global opacity scale.
    pub density: f64,
    /// Smoke tint.
    pub color: [f64; 3],
    pub noise_octaves: u32,
    /// Wavelength of the coarsest octave, in pixels.
    pub noise_base_scale: f64,
    /// Illumination-enhancement exponent applied to the clean image.
    pub blend_gamma: f64,
    /// Multiplicative RGB channel correction of the smoke tint.
    pub channel_gain: [f64; 3],
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

impl SmokeParams {
    /// Unit gains, gamma 1, white smoke.
    pub fn neutral(seed: u64, density: f64) -> Self {
        Self {
            seed,
            density,
            color: [1.0; 3],
            noise_octaves: 4,
            noise_base_scale: 64.0,
            blend_gamma: 1.0,
            channel_gain: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !within(self.density, DENSITY_RANGE) {
            bad.push(format!("density {}", self.density));
        }
        if !self.color.iter().all(|&c| within(c, COLOR_RANGE)) {
            bad.push(format!("color {:?}", self.color));
        }
        if !(OCTAVE_RANGE.0..=OCTAVE_RANGE.1).contains(&self.noise_octaves) {
            bad.push(format!("noise_octaves {}", self.noise_octaves));
        }
        if !(self.noise_base_scale.is_finite() && self.noise_base_scale >= 1.0) {
            bad.push(format!("noise_base_scale {}", self.noise_base_scale));
        }
        if !within(self.blend_gamma, GAMMA_RANGE) {
            bad.push(format!("blend_gamma {}", self.blend_gamma));
        }
        if !self.channel_gain.iter().all(|&g| within(g, GAIN_RANGE)) {
            bad.push(format!("channel_gain {:?}", self.channel_gain));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("smoke params out of range: {}", bad.join(", "))))
        }
    }

    /// Channel-corrected smoke radiance `min(1, color · gain)`.
    pub fn smoke_radiance(&self) -> [f64; 3] {
        std::array::from_fn(|c| (self.color[c] * self.channel_gain[c]).min(1.0))
    }

    pub fn mean_color(&self) -> f64 {
        self.color.iter().sum::<f64>() / 3.0
    }
}

/// Draws the parameters of item `index` from a master seed. The per-item seed is
/// the `index`-th SplitMix64 output, so items are independent of generation order.
pub fn randomize_params(master_seed: u64, index: u64) -> SmokeParams {
    let seed = splitmix_stream(master_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let density = uniform(DENSITY_RANGE);
    let color = [uniform(COLOR_RANGE), uniform(COLOR_RANGE), uniform(COLOR_RANGE)];
    let noise_base_scale = uniform(BASE_SCALE_RANGE);
    let blend_gamma = uniform(GAMMA_RANGE);
    let channel_gain = [uniform(GAIN_RANGE), uniform(GAIN_RANGE), uniform(GAIN_RANGE)];
    let noise_octaves = rng.random_range(OCTAVE_RANGE.0..=OCTAVE_RANGE.1);
    SmokeParams {
        seed,
        density,
        color,
        noise_octaves,
        noise_base_scale,
        blend_gamma,
        channel_gain,
    }
}

/// Fractal value-noise opacity map, min-max normalized to `[0, 1]` and scaled by
/// `density`. A pure function of `(h, w, params)`.
///
/// `noise_base_scale` is measured in pixels at the reference height
/// [`DEFAULT_RESOLUTION`]`.0`; other heights scale it proportionally, so a
/// low-resolution map looks like a downsampled full-resolution one.
pub fn gen_smoke_map(h: usize, w: usize, params: &SmokeParams) -> Result<ScalarField> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidParameter(format!("smoke map {h}x{w} below 8x8")));
    }
    params.validate()?;
    let wavelength = params.noise_base_scale * h as f64 / DEFAULT_RESOLUTION.0 as f64;
    let raw = fractal_noise(h, w, params.seed, params.noise_octaves, wavelength);
    let (lo, hi) = (raw.min_value(), raw.max_value());
    let span = hi - lo;
    let density = params.density;
    Ok(if span > 1e-12 {
        raw.map(|v| ((v - lo) / span) * density)
    } else {
        ScalarField::zeros(h, w)
    })
}

/// Alpha-blends smoke over a clean image:
/// `I_c = (1 − α)·J_c^γ + α·min(1, color_c·gain_c)`, with `α` the smoke map.
/// Returns the smoky image and the ground-truth smoke map `α·mean(color)`.
pub fn composite_smoke(
    clean: &Image,
    s_map: &ScalarField,
    params: &SmokeParams,
) -> Result<(Image, ScalarField)> {
    clean.ensure_same_dims(s_map)?;
    params.validate()?;
    if s_map.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter("smoke map must lie in [0, 1]".into()));
    }
    let smoke = params.smoke_radiance();
    let gamma = params.blend_gamma;
    let smoky = ColorField::from_fn(clean.height(), clean.width(), |y, x| {
        let alpha = s_map.at(y, x);
        let j = clean.pixel(y, x);
        std::array::from_fn(|c| {
            let lit = if gamma == 1.0 { j[c] } else { j[c].powf(gamma) };
            (1.0 - alpha) * lit + alpha * smoke[c]
        })
    });
    let mean_color = params.mean_color();
    Ok((smoky.to_image(), s_map.map(|a| a * mean_color)))
}

/// Undoes [`composite_smoke`] given the true parameters: the opacity map is
/// regenerated, the blend is inverted as a scattering model with `t = 1 − α`
/// and `A` the smoke radiance, and the gamma is undone.
pub fn oracle_restore(smoky: &Image, params: &SmokeParams) -> Result<Image> {
    let alpha = gen_smoke_map(smoky.height(), smoky.width(), params)?;
    let t = alpha.map(|a| 1.0 - a);
    let a = AtmosphericLight::new(params.smoke_radiance())?;
    let lit = invert_scattering(smoky, &t, &a)?;
    let inv_gamma = 1.0 / params.blend_gamma;
    Ok(Image::from_fn(lit.height(), lit.width(), |y, x| {
        lit.pixel(y, x).map(|v| v.powf(inv_gamma))
    }))
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub clean_path: PathBuf,
    pub smoky_path: PathBuf,
    pub smoke_map_path: PathBuf,
    #[serde(flatten)]
    pub params: SmokeParams,
}

/// A parsed manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<PairRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| {
                    Error::Data(format!("{}:{}: {e}", path.display(), n + 1))
                })
            })
            .collect::<Result<Vec<PairRecord>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Serializes records as line-delimited JSON.
pub fn manifest_to_string(records: &[PairRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| Error::Data(format!("manifest encoding: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub clean_dir: PathBuf,
    pub out_dir: PathBuf,
    pub count: usize,
    pub master_seed: u64,
    pub height: usize,
    pub width: usize,
}

impl DatasetConfig {
    pub fn new(clean_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, count: usize, master_seed: u64) -> Self {
        Self {
            clean_dir: clean_dir.into(),
            out_dir: out_dir.into(),
            count,
            master_seed,
            height: DEFAULT_RESOLUTION.0,
            width: DEFAULT_RESOLUTION.1,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Sorted list of PNG/JPEG files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Synthesizes `count` smoky/clean pairs. Clean sources are cycled in file-name
/// order, resized and quantized to 8 bits; pair `i` uses
/// `randomize_params(master_seed, i)`. Writes images under `out_dir` and returns
/// the path of the line-delimited manifest. Output is a pure function of the
/// clean images and the config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<PathBuf> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::InvalidParameter(format!(
            "resolution {}x{} below 8x8",
            cfg.height, cfg.width
        )));
    }
    let sources = list_images(&cfg.clean_dir)?;
    if sources.is_empty() {
        return Err(Error::Data(format!(
            "no png/jpeg images in {}",
            cfg.clean_dir.display()
        )));
    }
    let used = sources.len().min(cfg.count);
    for sub in ["clean", "smoky", "smoke_map"] {
        let d = cfg.out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let clean_rel: Vec<PathBuf> = (0..used)
        .map(|k| PathBuf::from("clean").join(format!("src_{k:05}.png")))
        .collect();
    let cleans = par::try_map_indices(used, |k| -> Result<Image> {
        let img = imaging::load_image(&sources[k])?;
        let img = imaging::resize_bilinear(&img, cfg.height, cfg.width)?.quantized();
        imaging::save_image(&img, cfg.out_dir.join(&clean_rel[k]))?;
        Ok(img)
    })?;

    let records = par::try_map_indices(cfg.count, |i| -> Result<PairRecord> {
        let k = i % used;
        let params = randomize_params(cfg.master_seed, i as u64);
        let alpha = gen_smoke_map(cfg.height, cfg.width, &params)?;
        let (smoky, s_gt) = composite_smoke(&cleans[k], &alpha, &params)?;
        let smoky_path = PathBuf::from("smoky").join(format!("{i:06}.png"));
        let smoke_map_path = PathBuf::from("smoke_map").join(format!("{i:06}.png"));
        imaging::save_image(&smoky, cfg.out_dir.join(&smoky_path))?;
        imaging::save_scalar_field(&s_gt, cfg.out_dir.join(&smoke_map_path))?;
        Ok(PairRecord {
            clean_path: clean_rel[k].clone(),
            smoky_path,
            smoke_map_path,
            params,
        })
    })?;

    let manifest = cfg.out_dir.join(MANIFEST_NAME);
    write_atomic(&manifest, manifest_to_string(&records)?.as_bytes())?;
    log::info!("wrote {} pairs to {}", records.len(), manifest.display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_map_is_zero() {
        let mut p = randomize_params(1, 0);
        p.density = 0.0;
        let m = gen_smoke_map(16, 20, &p).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoke_map_deterministic_and_bounded() {
        let p = randomize_params(9, 3);
        let a = gen_smoke_map(40, 50, &p).unwrap();
        let b = gen_smoke_map(40, 50, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.min_value() >= 0.0 && a.max_value() <= p.density + 1e-12);
    }

    #[test]
    fn smoke_map_rejects_tiny_dims() {
        let p = randomize_params(9, 3);
        assert!(gen_smoke_map(7, 50, &p).is_err());
        assert!(gen_smoke_map(50, 4, &p).is_err());
    }

    #[test]
    fn composite_identity_occlusion_and_hand_value() {
        let clean = Image::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.5]);
        let p = SmokeParams::neutral(0, 0.0);
        let (i, s) = composite_smoke(&clean, &ScalarField::zeros(8, 8), &p).unwrap();
        assert_eq!(i, clean);
        assert!(s.as_slice().iter().all(|&v| v == 0.0));

        let mut p = randomize_params(5, 5);
        p.channel_gain = [0.95, 1.0, 1.05];
        let (i, _) = composite_smoke(&clean, &ScalarField::filled(8, 8, [1.0]), &p).unwrap();
        let expect = p.smoke_radiance();
        for px in i.pixels() {
            for c in 0..3 {
                assert!((px[c] - (p.color[c] * p.channel_gain[c]).min(1.0)).abs() < 1e-12);
                assert!((px[c] - expect[c]).abs() < 1e-12);
            }
        }

        let clean = Image::filled(8, 8, [0.4; 3]);
        let p = SmokeParams::neutral(0, 1.0);
        let (i, s) = composite_smoke(&clean, &ScalarField::filled(8, 8, [0.5]), &p).unwrap();
        assert!(i.as_slice().iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(s.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let p = SmokeParams::neutral(0, 1.0);
        assert!(composite_smoke(&Image::zeros(8, 8), &ScalarField::zeros(8, 9), &p).is_err());
    }

    #[test]
    fn randomized_params_are_in_range_and_deterministic() {
        for i in 0..500 {
            let p = randomize_params(77, i);
            p.validate().unwrap();
            assert!(within(p.noise_base_scale, BASE_SCALE_RANGE));
            assert_eq!(p, randomize_params(77, i));
        }
    }

    #[test]
    fn oracle_restore_inverts_the_blend() {
        let clean = Image::from_fn(32, 40, |y, x| {
            [0.2 + 0.6 * (x as f64 / 40.0), 0.3, 0.1 + 0.5 * (y as f64 / 32.0)]
        });
        let mut p = randomize_params(11, 2);
        p.density = 0.6;
        let alpha = gen_smoke_map(32, 40, &p).unwrap();
        let (smoky, _) = composite_smoke(&clean, &alpha, &p).unwrap();
        let back = oracle_restore(&smoky, &p).unwrap();
        let err = clean
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max err {err}");
    }

    #[test]
    fn manifest_keys_match_interface() {
        let rec = PairRecord {
            clean_path: "clean/a.png".into(),
            smoky_path: "smoky/a.png".into(),
            smoke_map_path: "smoke_map/a.png".into(),
            params: randomize_params(1, 1),
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "blend_gamma", "channel_gain", "clean_path", "color", "density", "noise_base_scale",
                "noise_octaves", "seed", "smoke_map_path", "smoky_path"
            ]
        );
        let back: PairRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
