//! Atmospheric scattering model `I = J·t + A·(1 − t)`, its inversion, and the
//! `K`/`B` reparameterization `J = K·I − B + I` with `K = 1/t − 1`,
//! `B = A·(1/t − 1)`.
//!
//! Intermediate results are not clamped; only conversions to [`Image`] clamp.

use crate::error::{Error, Result};
use crate::imaging::{ColorField, Image, ScalarField};

/// Transmission floor applied before inversion.
pub const DEFAULT_T_FLOOR: f64 = 0.05;

/// Global atmospheric light, one radiance per channel in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtmosphericLight([f64; 3]);

impl AtmosphericLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "atmospheric light {rgb:?} must lie in (0, 1] per channel"
            )));
        }
        Ok(Self(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }
}

/// Head-style parameterization: `K` shared across channels, `B` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct KBField {
    k: ScalarField,
    b: ColorField,
}

impl KBField {
    /// Requires matching shapes and `K > −1` everywhere.
    pub fn new(k: ScalarField, b: ColorField) -> Result<Self> {
        k.ensure_same_dims(&b)?;
        if let Some(i) = k.as_slice().iter().position(|&v| v <= -1.0) {
            return Err(Error::InvalidParameter(format!(
                "K = {} at pixel {i}; K must exceed -1",
                k.as_slice()[i]
            )));
        }
        Ok(Self { k, b })
    }

    pub fn k(&self) -> &ScalarField {
        &self.k
    }

    pub fn b(&self) -> &ColorField {
        &self.b
    }

    pub fn dims(&self) -> (usize, usize) {
        self.k.dims()
    }
}

fn check_transmission(t: &ScalarField, lo_exclusive: bool, lo: f64) -> Result<()> {
    let bad = t.as_slice().iter().position(|&v| {
        let below = if lo_exclusive { v <= lo } else { v < lo };
        below || v > 1.0
    });
    match bad {
        Some(i) => Err(Error::InvalidParameter(format!(
            "transmission {} at pixel {i} outside {}{lo}, 1]",
            t.as_slice()[i],
            if lo_exclusive { "(" } else { "[" }
        ))),
        None => Ok(()),
    }
}

/// Forward model `I = J·t + A·(1 − t)` for `t ∈ (0, 1]`.
pub fn compose_scattering(j: &Image, t: &ScalarField, a: &AtmosphericLight) -> Result<Image> {
    j.ensure_same_dims(t)?;
    check_transmission(t, true, 0.0)?;
    let a = a.rgb();
    let field = ColorField::from_fn(j.height(), j.width(), |y, x| {
        let tv = t.at(y, x);
        let jp = j.pixel(y, x);
        std::array::from_fn(|c| jp[c] * tv + a[c] * (1.0 - tv))
    });
    Ok(field.to_image())
}

/// Inversion `J = (I − A + A·t) / t` with `t` floored at [`DEFAULT_T_FLOOR`].
pub fn invert_scattering(i: &Image, t: &ScalarField, a: &AtmosphericLight) -> Result<Image> {
    invert_scattering_with_floor(i, t, a, DEFAULT_T_FLOOR)
}

/// Inversion with an explicit transmission floor; the output is clamped to `[0, 1]`.
pub fn invert_scattering_with_floor(
    i: &Image,
    t: &ScalarField,
    a: &AtmosphericLight,
    t_floor: f64,
) -> Result<Image> {
    i.ensure_same_dims(t)?;
    if !(t_floor > 0.0 && t_floor <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "transmission floor {t_floor} outside (0, 1]"
        )));
    }
    let a = a.rgb();
    let field = ColorField::from_fn(i.height(), i.width(), |y, x| {
        let tv = t.at(y, x).max(t_floor);
        let ip = i.pixel(y, x);
        std::array::from_fn(|c| (ip[c] - a[c] + a[c] * tv) / tv)
    });
    Ok(field.to_image())
}

/// `K = 1/t − 1`, `B = A·(1/t − 1)` for `t ∈ [DEFAULT_T_FLOOR, 1]`.
pub fn kb_from_t_a(t: &ScalarField, a: &AtmosphericLight) -> Result<KBField> {
    check_transmission(t, false, DEFAULT_T_FLOOR)?;
    let a = a.rgb();
    let k = t.map(|tv| 1.0 / tv - 1.0);
    let b = ColorField::from_fn(t.height(), t.width(), |y, x| {
        let kv = 1.0 / t.at(y, x) - 1.0;
        a.map(|ac| ac * kv)
    });
    KBField::new(k, b)
}

/// `J = K·I − B + I` with `K` broadcast over channels. Unclamped.
pub fn reconstruct_kb(i: &ColorField, kb: &KBField) -> Result<ColorField> {
    i.ensure_same_dims(kb.k())?;
    let (k, b) = (kb.k(), kb.b());
    Ok(ColorField::from_fn(i.height(), i.width(), |y, x| {
        let kv = k.at(y, x);
        let ip = i.pixel(y, x);
        let bp = b.pixel(y, x);
        std::array::from_fn(|c| kv * ip[c] - bp[c] + ip[c])
    }))
}

/// Airlight `B / (K + 1)`, equal to `A·(1 − t)` when `(K, B)` derive from `(t, A)`.
pub fn airlight_from_kb(kb: &KBField) -> ColorField {
    let (k, b) = (kb.k(), kb.b());
    let (h, w) = kb.dims();
    ColorField::from_fn(h, w, |y, x| {
        let denom = k.at(y, x) + 1.0;
        b.pixel(y, x).map(|bc| bc / denom)
    })
}
