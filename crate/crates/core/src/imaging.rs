//! Image and scalar-field containers, raster I/O and bilinear resizing.
//!
//! Samples are `f64` in row-major, channel-interleaved order. [`Image`] carries
//! the `[0, 1]` range invariant; [`ColorField`] and [`ScalarField`] only require
//! finite values so intermediate quantities (unclamped reconstructions, `K`/`B`
//! maps, airlight) can live in the same containers.

use std::io::Cursor;
use std::ops::Deref;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::par;

/// An `H×W×C` field of finite samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<const C: usize> {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel map: transmission, smoke map, dark channel, depth, mask.
pub type ScalarField = Field<1>;
/// Three-channel field without a range constraint.
pub type ColorField = Field<3>;

impl<const C: usize> Field<C> {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * C {
            return Err(Error::Shape(format!(
                "{height}x{width}x{C} field needs {} samples, got {}",
                height * width * C,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of {height}x{width}x{C} field")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * C);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: [f64; C]) -> Self {
        let mut data = Vec::with_capacity(height * width * C);
        for _ in 0..height * width {
            data.extend_from_slice(&value);
        }
        Self::from_vec_unchecked(height, width, data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; C])
    }

    /// Builds a field from a per-pixel function, evaluated row-parallel.
    pub fn from_fn<F>(height: usize, width: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> [f64; C] + Send + Sync,
    {
        let mut data = vec![0.0; height * width * C];
        par::for_each_row(&mut data, width * C, |y, row| {
            for (x, px) in row.chunks_exact_mut(C).enumerate() {
                px.copy_from_slice(&f(y, x));
            }
        });
        Self::from_vec_unchecked(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; C] {
        let i = (y * self.width + x) * C;
        let mut out = [0.0; C];
        out.copy_from_slice(&self.data[i..i + C]);
        out
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(C)
    }

    pub fn ensure_same_dims<const D: usize>(&self, other: &Field<D>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Elementwise map over every sample.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Clamps every sample into `[lo, hi]`.
    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

impl ScalarField {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

impl ColorField {
    /// Export to an [`Image`], clamping to `[0, 1]`.
    pub fn to_image(&self) -> Image {
        Image(self.clamped(0.0, 1.0))
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> ScalarField {
        ScalarField::from_vec_unchecked(
            self.height,
            self.width,
            self.pixels()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        )
    }

    /// Per-pixel channel mean.
    pub fn channel_mean(&self) -> ScalarField {
        ScalarField::from_vec_unchecked(
            self.height,
            self.width,
            self.pixels().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        )
    }
}

/// `H×W×3` radiance in `[0, 1]`, channel order R, G, B.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(ColorField);

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from_field(ColorField::new(height, width, data)?)
    }

    /// Wraps a field, rejecting samples outside `[0, 1]`.
    pub fn try_from_field(field: ColorField) -> Result<Self> {
        if let Some(i) = field.as_slice().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "image sample {i} = {} outside [0, 1]",
                field.as_slice()[i]
            )));
        }
        Ok(Image(field))
    }

    pub(crate) fn from_field_unchecked(field: ColorField) -> Self {
        debug_assert!(field.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        Image(field)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Image(ColorField::filled(height, width, rgb.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image(ColorField::zeros(height, width))
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn<F>(height: usize, width: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> [f64; 3] + Send + Sync,
    {
        Image(ColorField::from_fn(height, width, |y, x| {
            f(y, x).map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
        }))
    }

    pub fn field(&self) -> &ColorField {
        &self.0
    }

    pub fn into_field(self) -> ColorField {
        self.0
    }

    /// Rounds every sample to the nearest 8-bit level, as saving and reloading would.
    pub fn quantized(&self) -> Image {
        Image(self.0.map(|v| quantize_u8(v) as f64 / 255.0))
    }
}

impl Deref for Image {
    type Target = ColorField;

    fn deref(&self) -> &ColorField {
        &self.0
    }
}

impl AsRef<ColorField> for Image {
    fn as_ref(&self) -> &ColorField {
        &self.0
    }
}

/// `round(v * 255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v };
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(Error::Format {
            path: path.into(),
            reason: "unrecognized raster format".into(),
        });
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            reason: other.to_string(),
        },
    })
}

/// Reads a PNG (or JPEG) into an [`Image`]. Grayscale is replicated to three
/// channels; an alpha channel is dropped with a warning.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynamic = open_dynamic(path)?;
    if dynamic.color().has_alpha() {
        log::warn!("{}: dropping alpha channel", path.display());
    }
    let rgb = dynamic.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Image::from_field_unchecked(ColorField::from_vec_unchecked(
        h as usize, w as usize, data,
    )))
}

fn encode_png(dynamic: DynamicImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    dynamic
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

fn dims_u32(h: usize, w: usize) -> Result<(u32, u32)> {
    match (u32::try_from(w), u32::try_from(h)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(Error::InvalidParameter(format!("{h}x{w} too large for png"))),
    }
}

/// Encodes an image as 8-bit RGB PNG bytes.
pub fn encode_image_png(img: &ColorField) -> Result<Vec<u8>> {
    let (w, h) = dims_u32(img.height(), img.width())?;
    let raw = img.as_slice().iter().map(|&v| quantize_u8(v)).collect();
    let rgb = RgbImage::from_raw(w, h, raw).expect("buffer length matches dimensions");
    encode_png(DynamicImage::ImageRgb8(rgb))
}

/// Writes an 8-bit RGB PNG. Samples are quantized with [`quantize_u8`];
/// out-of-range samples clamp. The file is replaced atomically.
pub fn save_image(img: &ColorField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_image_png(img)?)
}

/// Writes a single-channel map as 8-bit grayscale PNG (values clamp to `[0, 1]`).
pub fn save_scalar_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = dims_u32(field.height(), field.width())?;
    let raw = field.as_slice().iter().map(|&v| quantize_u8(v)).collect();
    let gray = GrayImage::from_raw(w, h, raw).expect("buffer length matches dimensions");
    write_atomic(path.as_ref(), &encode_png(DynamicImage::ImageLuma8(gray))?)
}

/// Reads a grayscale map normalized to `[0, 1]` (color inputs are converted to luma).
pub fn load_scalar_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let gray = open_dynamic(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(ScalarField::from_vec_unchecked(h as usize, w as usize, data))
}

/// Reads a grayscale map keeping raw integer sample values (8 or 16 bit), e.g.
/// a depth map stored in millimetres.
pub fn load_raw_map(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let dynamic = open_dynamic(path)?;
    let (h, w) = (dynamic.height() as usize, dynamic.width() as usize);
    let data: Vec<f64> = match dynamic {
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("expected a grayscale map, found {:?}", other.color()),
            })
        }
    };
    Ok(ScalarField::from_vec_unchecked(h, w, data))
}

/// Writes raw integer samples as a 16-bit grayscale PNG (values round and clamp to `u16`).
pub fn save_raw_map(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = dims_u32(field.height(), field.width())?;
    let raw: Vec<u16> = field
        .as_slice()
        .iter()
        .map(|&v| v.round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let gray = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, raw)
        .expect("buffer length matches dimensions");
    write_atomic(path.as_ref(), &encode_png(DynamicImage::ImageLuma16(gray))?)
}

/// Source coordinate for a half-pixel-centered mapping, split into the two taps
/// and the weight of the second one.
fn taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Separable bilinear resize with half-pixel-centered sampling.
pub fn resize_field<const C: usize>(
    src: &Field<C>,
    new_h: usize,
    new_w: usize,
) -> Result<Field<C>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidParameter(format!(
            "resize target {new_h}x{new_w} has zero size"
        )));
    }
    if src.pixel_count() == 0 {
        return Err(Error::InvalidParameter("cannot resize an empty field".into()));
    }
    if src.dims() == (new_h, new_w) {
        return Ok(src.clone());
    }
    let (h, w) = src.dims();
    let xtaps: Vec<_> = (0..new_w).map(|x| taps(x, w, new_w)).collect();
    let data = src.as_slice();
    let mut out = vec![0.0; new_h * new_w * C];
    par::for_each_row(&mut out, new_w * C, |y, row| {
        let (y0, y1, fy) = taps(y, h, new_h);
        for (x, px) in row.chunks_exact_mut(C).enumerate() {
            let (x0, x1, fx) = xtaps[x];
            for (c, v) in px.iter_mut().enumerate() {
                let at = |yy: usize, xx: usize| data[(yy * w + xx) * C + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                *v = top * (1.0 - fy) + bottom * fy;
            }
        }
    });
    Ok(Field::from_vec_unchecked(new_h, new_w, out))
}

/// Bilinear resize of an [`Image`]; the result stays in `[0, 1]`.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    let field = resize_field(img.field(), new_h, new_w)?;
    Ok(Image(field.clamped(0.0, 1.0)))
}
