//! RGB images and single-channel masks.
//!
//! Pixels are stored as unit-interval `f32`, row-major, channels interleaved.
//! PNG I/O goes through 8-bit buffers.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const MIN_SIDE: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

/// Converts an 8-bit level to the unit interval.
pub fn unit_from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Rounds half-up to the nearest 8-bit level.
pub fn u8_from_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidImage(format!("{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum")));
        }
        if data.len() != (width * height * 3) as usize {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let px = rgb.map(unit_from_u8);
        let data = (0..width * height).flat_map(|_| px).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_u8(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixel(x, y).map(u8_from_unit)
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&v| unit_from_u8(v)).collect();
        Self::new(img.width(), img.height(), data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| u8_from_unit(v)).collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer length checked at construction")
    }

    /// Snaps every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| unit_from_u8(u8_from_unit(v))).collect();
        Self { width: self.width, height: self.height, data }
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Bilinear resize through 8-bit buffers.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let out = image::imageops::resize(&self.to_rgb8(), width, height, image::imageops::FilterType::Triangle);
        Self::from_rgb8(&out)
    }

    /// `(3, H, W)` tensor with values mapped from `[0, 1]` to `[-1, 1]` when
    /// `signed`.
    pub fn to_chw_tensor(&self, signed: bool, dtype: DType, device: &Device) -> Result<Tensor> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut chw = vec![0f32; 3 * w * h];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * w * h + i] = if signed { px[c] * 2.0 - 1.0 } else { px[c] };
            }
        }
        Ok(Tensor::from_vec(chw, (3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_chw_tensor`]; out-of-range values are clamped.
    pub fn from_chw_tensor(t: &Tensor, signed: bool) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let chw: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut data = vec![0f32; 3 * w * h];
        for i in 0..w * h {
            for ch in 0..3 {
                let v = chw[ch * w * h + i];
                let v = if signed { (v + 1.0) / 2.0 } else { v };
                data[i * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
        Self::new(w as u32, h as u32, data)
    }
}

/// Single-channel map in `[0, 1]`; binary masks hold exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::InvalidImage(format!("mask needs {} values, got {}", width * height, data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; (width * height) as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| u8_from_unit(v)).collect();
        GrayImage::from_raw(self.width, self.height, raw).expect("buffer length checked at construction")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let data = img.as_raw().iter().map(|&v| unit_from_u8(v)).collect();
        Self::new(img.width(), img.height(), data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Nearest-neighbour resize, which keeps exact zeros and ones.
    pub fn resized_nearest(&self, width: u32, height: u32) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            let sy = ((y as u64 * self.height as u64) / height as u64) as u32;
            for x in 0..width {
                let sx = ((x as u64 * self.width as u64) / width as u64) as u32;
                data.push(self.get(sx, sy));
            }
        }
        Self { width, height, data }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.height as usize, self.width as usize), device)?
            .to_dtype(dtype)?)
    }
}
