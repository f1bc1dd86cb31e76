use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Non-spatial augmentation ranges. Intensities live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricConfig {
    pub gaussian_noise_sigma: f64,
    /// Odd blur kernel sizes, one drawn uniformly per image; 1 disables blur.
    pub blur_kernels: Vec<usize>,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Hue shift as a fraction of the colour wheel.
    pub hue: [f64; 2],
    /// Probability of a channel shuffle, and independently of conversion to
    /// grayscale.
    pub channel_shuffle_prob: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            gaussian_noise_sigma: 0.02,
            blur_kernels: vec![1, 3, 5],
            brightness: [0.5, 1.5],
            contrast: [0.5, 1.5],
            saturation: [0.8, 1.2],
            hue: [-0.2, 0.2],
            channel_shuffle_prob: 0.5,
        }
    }
}

impl PhotometricConfig {
    pub fn identity() -> Self {
        Self {
            gaussian_noise_sigma: 0.0,
            blur_kernels: vec![1],
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            hue: [0.0, 0.0],
            channel_shuffle_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_noise_sigma >= 0.0) {
            return Err(Error::config("photometric.gaussian_noise_sigma", "must be >= 0"));
        }
        if self.blur_kernels.is_empty() || self.blur_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("photometric.blur_kernels", "must be a non-empty list of odd sizes"));
        }
        for (name, r, lo) in [
            ("brightness", self.brightness, 0.0),
            ("contrast", self.contrast, 0.0),
            ("saturation", self.saturation, 0.0),
            ("hue", self.hue, -0.5),
        ] {
            if !(r[0] <= r[1] && r[0] >= lo) {
                return Err(Error::config(format!("photometric.{name}"), "must be a non-empty [lo, hi] range"));
            }
        }
        if self.hue[1] > 0.5 {
            return Err(Error::config("photometric.hue", "must lie within [-0.5, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.channel_shuffle_prob) {
            return Err(Error::config("photometric.channel_shuffle_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f32 {
    (if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] }) as f32
}

fn clamp(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn gray_plane(img: &Image) -> Vec<f32> {
    (0..img.height).flat_map(|y| (0..img.width).map(move |x| (y, x))).map(|(y, x)| img.gray_value(y, x)).collect()
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian with OpenCV's default sigma for kernel size `k`.
fn gaussian_blur(img: &mut Image, k: usize) {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (k / 2) as isize;
    let mut kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (img.height as isize, img.width as isize);
    // Reflect-101 border, as OpenCV does by default.
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    for c in 0..img.channels {
        let plane = img.plane(c).to_vec();
        let mut tmp = vec![0.0f32; plane.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = (-r..=r)
                    .map(|d| kernel[(d + r) as usize] * plane[(y * w) as usize + reflect(x + d, w)])
                    .sum();
            }
        }
        let dst = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[(y * w + x) as usize] = (-r..=r)
                    .map(|d| kernel[(d + r) as usize] * tmp[reflect(y + d, h) * w as usize + x as usize])
                    .sum();
            }
        }
    }
}

/// Brightness, contrast, saturation and hue jitter, optional channel
/// shuffle and grayscale conversion, blur, then additive Gaussian noise.
/// The result is clamped to `[0, 1]` and fully determined by `seed`.
pub fn apply_photometric(image: &Image, config: &PhotometricConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();

    let b = draw(&mut rng, config.brightness);
    if b != 1.0 {
        img.data.iter_mut().for_each(|v| *v *= b);
        clamp(&mut img);
    }

    let c = draw(&mut rng, config.contrast);
    if c != 1.0 {
        let mean = gray_plane(&img).iter().sum::<f32>() / img.plane_len() as f32;
        img.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
        clamp(&mut img);
    }

    let s = draw(&mut rng, config.saturation);
    if s != 1.0 && img.channels == 3 {
        let gray = gray_plane(&img);
        for ch in 0..3 {
            img.plane_mut(ch).iter_mut().zip(&gray).for_each(|(v, g)| *v = (*v - g) * s + g);
        }
        clamp(&mut img);
    }

    let hue = draw(&mut rng, config.hue);
    if hue != 0.0 && img.channels == 3 {
        let n = img.plane_len();
        for i in 0..n {
            let (h, sat, val) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
            let (r, g, bl) = hsv_to_rgb(h + hue, sat, val);
            img.data[i] = r;
            img.data[n + i] = g;
            img.data[2 * n + i] = bl;
        }
        clamp(&mut img);
    }

    if img.channels == 3 && rng.random_bool(config.channel_shuffle_prob) {
        let mut order = [0usize, 1, 2];
        order.shuffle(&mut rng);
        let src = img.clone();
        for (dst, &from) in order.iter().enumerate() {
            img.plane_mut(dst).copy_from_slice(src.plane(from));
        }
    }
    if img.channels == 3 && rng.random_bool(config.channel_shuffle_prob) {
        let gray = gray_plane(&img);
        for ch in 0..3 {
            img.plane_mut(ch).copy_from_slice(&gray);
        }
    }

    let k = config.blur_kernels[rng.random_range(0..config.blur_kernels.len())];
    if k > 1 {
        gaussian_blur(&mut img, k);
    }

    if config.gaussian_noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, config.gaussian_noise_sigma as f32).expect("sigma validated");
        img.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    clamp(&mut img);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> Image {
        Image::from_fn(3, 12, 16, |c, y, x| ((c * 37 + y * 11 + x * 5) % 97) as f32 / 96.0)
    }

    #[test]
    fn identity_config_is_noop() {
        let img = pattern();
        assert_eq!(apply_photometric(&img, &PhotometricConfig::identity(), 9), img);
    }

    #[test]
    fn brightness_scales_constant_image() {
        let cfg = PhotometricConfig { brightness: [1.5, 1.5], ..PhotometricConfig::identity() };
        let out = apply_photometric(&Image::filled(3, 8, 8, 0.5), &cfg, 1);
        assert!(out.data.iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn noise_has_requested_std() {
        let cfg = PhotometricConfig { gaussian_noise_sigma: 0.02, ..PhotometricConfig::identity() };
        let img = Image::filled(1, 1000, 1000, 0.5);
        let out = apply_photometric(&img, &cfg, 5);
        let n = out.data.len() as f64;
        let mean = out.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (out.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
    }

    #[test]
    fn default_config_is_deterministic_and_bounded() {
        let cfg = PhotometricConfig::default();
        let a = apply_photometric(&pattern(), &cfg, 42);
        assert_eq!(a, apply_photometric(&pattern(), &cfg, 42));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5f32, 0.9f32), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut img = Image::filled(1, 6, 6, 0.4);
        gaussian_blur(&mut img, 5);
        assert!(img.data.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
