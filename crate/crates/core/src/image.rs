//! Dense H×W×C image tensors and PNG conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// (height, width, channels)
pub type Shape = (usize, usize, usize);

/// Row-major H×W×C tensor. Pixel `(y, x)` channel `c` lives at
/// `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        let (h, w, c) = shape;
        Self {
            height: h,
            width: w,
            channels: c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let (h, w, c) = shape;
        if data.len() != h * w * c {
            return Err(Error::Dimension {
                left: h * w * c,
                right: data.len(),
            });
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let (h, w, c) = shape;
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        (self.height, self.width, self.channels)
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

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel vector of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn clamped01(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.max(T::zero()).min(T::one());
        }
        out
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        let n = T::from_usize(self.data.len().max(1)).unwrap();
        let s = self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(s / n)
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Decodes an 8-bit PNG into `[0, 1]` by dividing by 255. Grey, RGB and
    /// RGBA inputs are converted to `channels` (1 or 3).
    pub fn read_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<u8> = match channels {
            1 => img.to_luma8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            4 => img.to_rgba8().into_raw(),
            c => return Err(Error::invalid(format!("unsupported channel count {c} for PNG input"))),
        };
        let scale = T::lit(255.0);
        let data = raw.into_iter().map(|b| T::from_u8(b).unwrap() / scale).collect();
        Self::from_vec((h, w, channels), data)
    }

    /// Writes an 8-bit PNG after clamping to `[0, 1]`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::invalid(format!("unsupported channel count {c} for PNG output"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }
}
