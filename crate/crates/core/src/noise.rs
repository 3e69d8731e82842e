//! Seeded lattice value noise and its fractal (multi-octave) sum.

use crate::imaging::ScalarField;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `index`-th output of a SplitMix64 stream seeded with `seed`.
pub fn splitmix_stream(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

fn hash_unit(seed: u64, layer: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(layer.wrapping_mul(GOLDEN) ^ splitmix64((ix as u64) ^ (iy as u64).rotate_left(32))),
    );
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[0, 1)` on a unit lattice; `layer` selects an independent lattice.
pub fn value_noise(seed: u64, layer: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smoothstep(x - fx), smoothstep(y - fy));
    let v00 = hash_unit(seed, layer, ix, iy);
    let v10 = hash_unit(seed, layer, ix + 1, iy);
    let v01 = hash_unit(seed, layer, ix, iy + 1);
    let v11 = hash_unit(seed, layer, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * tx;
    let bottom = v01 + (v11 - v01) * tx;
    top + (bottom - top) * ty
}

/// Unnormalized fractal sum: octave `o` has amplitude `2^-o` and wavelength
/// `base_wavelength / 2^o` pixels. Each octave gets its own lattice offset.
pub fn fractal_noise(
    height: usize,
    width: usize,
    seed: u64,
    octaves: u32,
    base_wavelength: f64,
) -> ScalarField {
    let layers: Vec<(f64, f64, f64, f64)> = (0..octaves)
        .map(|o| {
            let scale = (1u64 << o) as f64;
            let freq = scale / base_wavelength;
            let ox = hash_unit(seed, 1_000 + o as u64, 0, 0) * 4096.0;
            let oy = hash_unit(seed, 2_000 + o as u64, 0, 0) * 4096.0;
            (freq, 1.0 / scale, ox, oy)
        })
        .collect();
    ScalarField::from_fn(height, width, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let v = layers
            .iter()
            .enumerate()
            .map(|(o, &(freq, amp, ox, oy))| amp * value_noise(seed, o as u64, px * freq + ox, py * freq + oy))
            .sum();
        [v]
    })
}
