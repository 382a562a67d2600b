//! The individual transforms. Every output stays in `[0, 1]`.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use tensor_core::Image;

use crate::TransformError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Crop,
    Resize,
    Brightness,
    Contrast,
    Jpeg,
    Identity,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Crop => "crop",
            TransformKind::Resize => "resize",
            TransformKind::Brightness => "brightness",
            TransformKind::Contrast => "contrast",
            TransformKind::Jpeg => "jpeg",
            TransformKind::Identity => "identity",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A transform and its parameter: a ratio for crop and resize, a factor for
/// brightness and contrast, a quality for JPEG. Identity ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub parameter: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, parameter: f64) -> Result<Self, TransformError> {
        let spec = TransformSpec { kind, parameter };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        TransformSpec {
            kind: TransformKind::Identity,
            parameter: 1.0,
        }
    }

    pub fn crop(ratio: f64) -> Result<Self, TransformError> {
        Self::new(TransformKind::Crop, ratio)
    }

    pub fn resize(ratio: f64) -> Result<Self, TransformError> {
        Self::new(TransformKind::Resize, ratio)
    }

    pub fn brightness(factor: f64) -> Result<Self, TransformError> {
        Self::new(TransformKind::Brightness, factor)
    }

    pub fn contrast(factor: f64) -> Result<Self, TransformError> {
        Self::new(TransformKind::Contrast, factor)
    }

    pub fn jpeg(quality: u8) -> Result<Self, TransformError> {
        Self::new(TransformKind::Jpeg, f64::from(quality))
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let p = self.parameter;
        let bad = |expected| {
            Err(TransformError::InvalidParameter {
                kind: self.kind,
                value: p,
                expected,
            })
        };
        match self.kind {
            TransformKind::Crop | TransformKind::Resize if !(p > 0.0 && p <= 1.0) => bad("ratio must lie in (0, 1]"),
            TransformKind::Brightness | TransformKind::Contrast if !(p > 0.0 && p.is_finite()) => {
                bad("factor must be positive and finite")
            }
            TransformKind::Jpeg if !((1.0..=100.0).contains(&p) && p.fract() == 0.0) => {
                bad("quality must be an integer in [1, 100]")
            }
            _ => Ok(()),
        }
    }
}

/// Applies one transform to an image in `[0, 1]`.
pub fn apply_transform(image: &Image, spec: &TransformSpec) -> Result<Image, TransformError> {
    spec.validate()?;
    image.check_unit_range("apply_transform")?;
    match spec.kind {
        TransformKind::Identity => Ok(image.clone()),
        TransformKind::Crop => {
            let (h, w) = reduced(image, spec)?;
            let (y0, x0) = ((image.height() - h) / 2, (image.width() - w) / 2);
            Ok(image.crop(y0, x0, h, w)?)
        }
        TransformKind::Resize => {
            let (h, w) = reduced(image, spec)?;
            Ok(bilinear_resize(image, h, w))
        }
        TransformKind::Brightness => {
            let mut out = image.clone();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (spec.parameter * *v).clamp(0.0, 1.0));
            Ok(out)
        }
        TransformKind::Contrast => Ok(contrast(image, spec.parameter)),
        TransformKind::Jpeg => jpeg_round_trip(image, spec.parameter as u8),
    }
}

/// Side lengths `floor(ratio * side)` for crop and resize.
fn reduced(image: &Image, spec: &TransformSpec) -> Result<(usize, usize), TransformError> {
    let h = (spec.parameter * image.height() as f64).floor() as usize;
    let w = (spec.parameter * image.width() as f64).floor() as usize;
    if h == 0 || w == 0 {
        return Err(TransformError::Empty {
            kind: spec.kind,
            value: spec.parameter,
            height: h,
            width: w,
        });
    }
    Ok((h, w))
}

/// Bilinear interpolation with half-pixel centers and edge clamping, no
/// antialiasing.
fn bilinear_resize(image: &Image, h: usize, w: usize) -> Image {
    let c = image.channels();
    let (sh, sw) = (image.height() as f64 / h as f64, image.width() as f64 / w as f64);
    let taps = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let (y0, y1, fy) = taps(y, sh, image.height());
        for x in 0..w {
            let (x0, x1, fx) = taps(x, sw, image.width());
            for ch in 0..c {
                let top = image.get(y0, x0, ch) * (1.0 - fx) + image.get(y0, x1, ch) * fx;
                let bottom = image.get(y1, x0, ch) * (1.0 - fx) + image.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, c, data).expect("resize shape")
}

/// Scales each channel's deviation from its own mean. The mean is taken
/// relative to the channel minimum, so a constant channel maps to itself
/// exactly; factor 1 is an exact passthrough.
fn contrast(image: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return image.clone();
    }
    let c = image.channels();
    let n = (image.height() * image.width()) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let values = image.data().iter().skip(ch).step_by(c);
        let lo = values.clone().fold(f64::INFINITY, |a, &v| a.min(v));
        let mean = lo + values.map(|v| v - lo).sum::<f64>() / n;
        for v in out.data_mut().iter_mut().skip(ch).step_by(c) {
            *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Baseline JPEG encode and decode at the given quality, through 8-bit RGB.
pub fn jpeg_round_trip(image: &Image, quality: u8) -> Result<Image, TransformError> {
    if image.channels() != 3 {
        return Err(TransformError::Channels(image.channels()));
    }
    let (w, h) = (image.width() as u32, image.height() as u32);
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut encoded = Vec::new();
    JpegEncoder::new_with_quality(&mut encoded, quality.clamp(1, 100))
        .encode(&bytes, w, h, ExtendedColorType::Rgb8)
        .map_err(|e| TransformError::Jpeg(e.to_string()))?;
    let decoded: RgbImage = image::load(Cursor::new(encoded), ImageFormat::Jpeg)
        .map_err(|e| TransformError::Jpeg(e.to_string()))?
        .to_rgb8();
    let data = decoded.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(Image::new(image.height(), image.width(), 3, data)?)
}
