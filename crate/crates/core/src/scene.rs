//! Procedural endoscopy-like clean scenes: shaded tissue with vessels, an
//! optional instrument shaft, specular highlights and circular vignetting.
//! Used to build synthetic corpora when no real clean images are at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;
use crate::noise::{fractal_noise, value_noise};

struct Vessel {
    amplitude: f64,
    freq: f64,
    phase: f64,
    offset: f64,
    horizontal: bool,
    width: f64,
}

struct Shaft {
    origin: (f64, f64),
    dir: (f64, f64),
    half_width: f64,
    gray: f64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders a deterministic scene of size `h×w` from `seed`.
pub fn tissue_scene(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4_E000);
    let scale = h.min(w) as f64;
    let tissue = [rng.random_range(0.55..0.9), rng.random_range(0.12..0.35), rng.random_range(0.1..0.3)];
    let fat = [rng.random_range(0.75..0.95), rng.random_range(0.55..0.75), rng.random_range(0.25..0.45)];
    let fat_level = rng.random_range(0.45..0.8);
    let vessels: Vec<Vessel> = (0..rng.random_range(1..4))
        .map(|_| Vessel {
            amplitude: rng.random_range(0.05..0.2) * scale,
            freq: rng.random_range(1.0..4.0) / scale,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            offset: rng.random_range(0.15..0.85),
            horizontal: rng.random_bool(0.5),
            width: rng.random_range(0.01..0.03) * scale,
        })
        .collect();
    let shaft = rng.random_bool(0.7).then(|| {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let reach = 0.75 * (cy * cy + cx * cx).sqrt();
        Shaft {
            origin: (cy + reach * angle.sin(), cx + reach * angle.cos()),
            dir: (-angle.sin(), -angle.cos()),
            half_width: rng.random_range(0.06..0.12) * scale,
            gray: rng.random_range(0.35..0.65),
        }
    });
    let shaft_len = rng.random_range(0.5..0.9) * (h.max(w) as f64);
    let highlights: Vec<(f64, f64, f64)> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.01..0.03) * scale,
            )
        })
        .collect();
    let vignette_start = rng.random_range(0.55..0.8);

    let shade_seed = seed.wrapping_mul(3).wrapping_add(1);
    let shading = fractal_noise(h, w, shade_seed, 3, 0.8 * scale);
    let fat_mask = fractal_noise(h, w, seed.wrapping_mul(5).wrapping_add(2), 3, 0.6 * scale);
    let texture_seed = seed.wrapping_mul(7).wrapping_add(3);

    Image::from_fn(h, w, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let fat_t = smoothstep(fat_level, fat_level + 0.15, fat_mask.at(y, x) / 1.75);
        let mut rgb: [f64; 3] = std::array::from_fn(|c| tissue[c] * (1.0 - fat_t) + fat[c] * fat_t);

        let fine = value_noise(texture_seed, 0, fx / (0.04 * scale), fy / (0.04 * scale));
        let shade = 0.55 + 0.5 * shading.at(y, x) / 1.75 + 0.12 * (fine - 0.5);
        rgb.iter_mut().for_each(|v| *v *= shade);

        for v in &vessels {
            let (along, across) = if v.horizontal { (fx, fy) } else { (fy, fx) };
            let extent = if v.horizontal { h as f64 } else { w as f64 };
            let center = v.offset * extent + v.amplitude * (v.freq * along * std::f64::consts::TAU + v.phase).sin();
            let k = (-((across - center) / v.width).powi(2)).exp();
            rgb = [rgb[0] * (1.0 - 0.45 * k), rgb[1] * (1.0 - 0.7 * k), rgb[2] * (1.0 - 0.6 * k)];
        }

        if let Some(s) = &shaft {
            let (dy, dx) = (fy - s.origin.0, fx - s.origin.1);
            let along = dy * s.dir.0 + dx * s.dir.1;
            let across = (dy * s.dir.1 - dx * s.dir.0).abs();
            if along > 0.0 && along < shaft_len && across < s.half_width {
                let rim = 1.0 - 0.5 * (across / s.half_width).powi(2);
                let g = s.gray * rim;
                rgb = [g, g * 1.02, g * 1.05];
            }
        }

        for &(hy, hx, r) in &highlights {
            let d2 = ((fy - hy).powi(2) + (fx - hx).powi(2)) / (r * r);
            let k = (-d2).exp();
            rgb.iter_mut().for_each(|v| *v = *v * (1.0 - k) + k);
        }

        let ry = (fy / h as f64 - 0.5) * 2.0;
        let rx = (fx / w as f64 - 0.5) * 2.0;
        let radius = (ry * ry + rx * rx).sqrt() / std::f64::consts::SQRT_2;
        let vignette = 1.0 - 0.9 * smoothstep(vignette_start, 1.0, radius);
        rgb.map(|v| v * vignette)
    })
}
