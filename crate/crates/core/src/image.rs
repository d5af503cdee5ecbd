use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DissError, Result};
use crate::scalar::Scalar;

/// Channel-major image. Data and conditions live in model space `[-1, 1]`;
/// intermediate latents are unbounded.
#[derive(Clone, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: fmt::Debug> fmt::Debug for Image<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

/// Byte (0..=255) to model space.
pub fn byte_to_model(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Model space to byte, clamped and rounded half-up.
pub fn model_to_byte(v: f64) -> u8 {
    let b = ((v + 1.0) * 127.5).clamp(0.0, 255.0);
    (b + 0.5).floor() as u8
}

impl<T: Scalar> Image<T> {
    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "image dimensions must be positive");
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DissError::range("image dimensions", "must be positive"));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(DissError::shape("image buffer", expected, data.len()));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Standard-normal image drawn from `rng` in channel-major order.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let n = channels * height * width;
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn ensure_shape(&self, expected: Shape, context: &'static str) -> Result<()> {
        if self.shape() != expected {
            return Err(DissError::shape(context, expected, self.shape()));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        other.ensure_shape(self.shape(), context)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch (callers validate first).
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn channel_mean(&self, c: usize) -> T {
        let p = self.plane(c);
        let s: f64 = p.iter().map(|v| v.to_f64_lossy()).sum();
        T::from_f64_lossy(s / p.len() as f64)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.data.len() as f64
    }

    /// Root-mean-square difference, accumulated in f64.
    pub fn rms_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "rms_diff shape mismatch");
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Channel-major bytes in file space.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| model_to_byte(v.to_f64_lossy())).collect()
    }

    pub fn from_bytes(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| T::from_f64_lossy(byte_to_model(b))).collect();
        Self::from_vec(channels, height, width, data)
    }

    /// Round-trip through file space.
    pub fn quantized(&self) -> Self {
        self.map(|v| T::from_f64_lossy(byte_to_model(model_to_byte(v.to_f64_lossy()))))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(DissError::Empty("channel list"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(DissError::shape("concat_channels", format!("{h}x{w}"), format!("{}x{}", p.height, p.width)));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(channels, h, w, data)
    }

    /// Copy of channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.channels, "channel slice out of range");
        let n = self.height * self.width;
        Image {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }
}
