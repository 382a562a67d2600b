//! Channels-last images with values in `[0, 1]`.
//!
//! Models consume N x C x H x W tensors; [`Image::to_tensor`] and
//! [`Image::from_tensor`] convert between the two layouts.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(TensorError::DataLength {
                shape: vec![height, width, channels],
                len: data.len(),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Errors unless every value lies in `[0, 1]`.
    pub fn check_unit_range(&self, op: &'static str) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(TensorError::invalid(op, format!("pixel value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    /// 1 x C x H x W tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(vec![1, c, h, w], out).expect("image tensor shape")
    }

    /// Inverse of [`Image::to_tensor`] for a tensor with leading size 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(TensorError::invalid("image", format!("need 1 x C x H x W, got {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut out = vec![0.0; t.numel()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = t.data()[(ch * h + y) * w + x];
                }
            }
        }
        Image::new(h, w, c, out)
    }

    /// Batches same-sized images into an N x C x H x W tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let ts: Vec<Tensor> = images.iter().map(|im| im.to_tensor()).collect();
        Tensor::stack(&ts)
    }

    /// Sub-window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(TensorError::invalid(
                "crop",
                format!("window {h}x{w} at ({y0}, {x0}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(h, w, c, data)
    }

    /// Mean squared difference to another image of the same size.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(TensorError::mismatch(
                "image mse",
                &[self.height, self.width, self.channels],
                &[other.height, other.width, other.channels],
            ));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Peak signal-to-noise ratio in dB for unit-range signals.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
