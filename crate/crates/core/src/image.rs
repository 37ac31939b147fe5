//! RGB images with `f32` channels in `[0, 1]`, stored row-major and
//! channel-interleaved (`H×W×3`).

use std::path::Path;

use crate::error::{bail_input, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail_input!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            );
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 601 luma, one value per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Snap every channel to the nearest 8-bit level so PNG storage is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / n
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|b| *b as f32 / 255.0).collect();
        Self::from_vec(width, height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::input("image buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_err(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::new(5, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.0137).fract();
        }
        img.quantize();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(Image::from_vec(2, 2, vec![0.0; 11]).is_err());
    }
}
