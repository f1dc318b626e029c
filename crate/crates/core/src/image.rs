//! Canonical in-memory image representation.
//!
//! Pixels live in `[0, 1]` as `f32`, stored channel-major (CHW). Conversion to
//! 8-bit happens only at codec and file boundaries so quantization is applied
//! exactly once per boundary crossing.

use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image tensor in `[0, 1]`, CHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn splat(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Parameter(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Interleaved 8-bit RGB bytes (row-major), quantized by round-to-nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        debug_assert_eq!(self.channels, 3);
        let plane = self.height * self.width;
        let mut out = vec![0u8; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[i * 3 + c] = quantize(self.data[c * plane + i]);
            }
        }
        out
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Parameter(format!(
                "rgb8 buffer length {} does not match {}x{}x3",
                bytes.len(),
                height,
                width
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[i * 3 + c] as f32 / 255.0;
            }
        }
        Ok(Self {
            channels: 3,
            height,
            width,
            data,
        })
    }

    /// Round trip through 8-bit quantization (the identity codec).
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8(), self.height, self.width).expect("shape preserved")
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(Error::from)?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_rgb8(img.as_raw(), h, w)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.to_rgb8(),
        )
        .expect("buffer sized for dimensions");
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
