//! Planar floating-point images with intensities in `[0, 1]`.

use std::path::Path;

use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-planar image: `data[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::new(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane_len()..(c + 1) * self.plane_len()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Reads any raster format supported by `image` as RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        out
    }

    /// 8-bit RGB export. Single-channel images are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| {
                let c = c.min(self.channels - 1);
                (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::new(self.channels, height, width);
        for c in 0..self.channels {
            let buf: ImageBuffer<image::Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, self.plane(c).to_vec())
                    .expect("plane buffer matches dimensions");
            let resized = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
            out.plane_mut(c).copy_from_slice(resized.as_raw());
        }
        out
    }

    /// Scales to cover `height × width` preserving aspect, then centre-crops.
    pub fn resize_cover(&self, height: usize, width: usize) -> Self {
        let s = (height as f64 / self.height as f64).max(width as f64 / self.width as f64);
        let rh = ((self.height as f64 * s).round() as usize).max(height);
        let rw = ((self.width as f64 * s).round() as usize).max(width);
        let resized = self.resize(rh, rw);
        let (y0, x0) = ((rh - height) / 2, (rw - width) / 2);
        Self::from_fn(self.channels, height, width, |c, y, x| resized.get(c, y + y0, x + x0))
    }

    /// Luma with ITU-R 601 weights.
    pub fn gray_value(&self, y: usize, x: usize) -> f32 {
        if self.channels < 3 {
            return self.get(0, y, x);
        }
        0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
    }

    /// `[1, C, H, W]` tensor with intensities mapped from `[0, 1]` to `[−1, 1]`.
    pub fn to_network_input(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|v| v * 2.0 - 1.0).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let img = Image::from_fn(3, 4, 5, |c, y, x| ((c * 20 + y * 5 + x) as f32) / 255.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn resize_cover_keeps_requested_size() {
        let img = Image::filled(3, 50, 100, 0.25);
        let out = img.resize_cover(24, 32);
        assert_eq!((out.height, out.width), (24, 32));
        assert!(out.data.iter().all(|v| (v - 0.25).abs() < 1e-5));
    }
}
