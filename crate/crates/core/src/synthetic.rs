//! Procedural test imagery: textured scenes of random shapes, a corpus
//! writer, and a small dataset in the HPatches layout with known
//! homographies.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::hpatches::write_homography;
use crate::geometry::{apply_photometric, sample_homography, warp_image, Homography, HomographyConfig, PhotometricConfig};
use crate::raster::Image;
use crate::seed;

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn paint(img: &mut Image, y: usize, x: usize, c: [f32; 3]) {
    for (ch, v) in c.iter().enumerate() {
        img.set(ch, y, x, *v);
    }
}

/// A `height × width` RGB scene: a smooth gradient background overlaid with
/// rectangles, ellipses, triangles, line segments and checker patches.
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let span = (height + width) as f64;
    let mut img = Image::from_fn(3, height, width, |c, y, x| {
        let t = ((x as f64 * ca + y as f64 * sa) / span + 0.5).clamp(0.0, 1.0) as f32;
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let (h, w) = (height as f64, width as f64);
    let area = h * w;
    let shapes = ((area / 900.0) as usize).clamp(8, 400);
    for _ in 0..shapes {
        let c = color(&mut rng);
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let size = rng.random_range(0.03..0.18) * h.min(w);
        match rng.random_range(0..5) {
            0 => {
                let (rw, rh) = (size * rng.random_range(0.5..1.5), size * rng.random_range(0.5..1.5));
                fill(&mut img, c, |x, y| (x - cx).abs() <= rw && (y - cy).abs() <= rh);
            }
            1 => {
                let (ax, ay) = (size, size * rng.random_range(0.4..1.0));
                fill(&mut img, c, |x, y| ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0);
            }
            2 => {
                let pts: Vec<[f64; 2]> = (0..3)
                    .map(|_| [cx + rng.random_range(-size..size) * 1.5, cy + rng.random_range(-size..size) * 1.5])
                    .collect();
                fill(&mut img, c, |x, y| inside_triangle([x, y], &pts));
            }
            3 => {
                let len = size * 3.0;
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let thick = rng.random_range(1.0..3.0);
                let (dx, dy) = (a.cos(), a.sin());
                fill(&mut img, c, |x, y| {
                    let (px, py) = (x - cx, y - cy);
                    let along = px * dx + py * dy;
                    let across = (px * -dy + py * dx).abs();
                    along.abs() <= len / 2.0 && across <= thick
                });
            }
            _ => {
                let cell = rng.random_range(3.0..8.0);
                let c2 = color(&mut rng);
                let half = size;
                for y in (cy - half).max(0.0) as usize..((cy + half) as usize).min(height) {
                    for x in (cx - half).max(0.0) as usize..((cx + half) as usize).min(width) {
                        let on = ((x as f64 - cx + half) / cell) as i64 % 2 == ((y as f64 - cy + half) / cell) as i64 % 2;
                        paint(&mut img, y, x, if on { c } else { c2 });
                    }
                }
            }
        }
    }
    img
}

fn fill(img: &mut Image, c: [f32; 3], inside: impl Fn(f64, f64) -> bool) {
    for y in 0..img.height {
        for x in 0..img.width {
            if inside(x as f64, y as f64) {
                paint(img, y, x, c);
            }
        }
    }
}

fn inside_triangle(p: [f64; 2], t: &[[f64; 2]]) -> bool {
    let sign = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| (a[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (a[1] - c[1]);
    let d1 = sign(p, t[0], t[1]);
    let d2 = sign(p, t[1], t[2]);
    let d3 = sign(p, t[2], t[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// `count` scenes in memory.
pub fn scenes(count: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    (0..count).map(|i| scene(height, width, seed::derive(seed, &[i as u64]))).collect()
}

/// Writes `count` PNG scenes named `img_XXXX.png` into `dir`.
pub fn write_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes(count, height, width, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("img_{i:04}.png"));
            img.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Writes `illumination` + `viewpoint` sequences in the HPatches layout.
/// Viewpoint targets are warps of the reference; illumination targets keep
/// the geometry and change brightness, contrast and colour.
pub fn write_hpatches(dir: &Path, illumination: usize, viewpoint: usize, height: usize, width: usize, seed: u64) -> Result<()> {
    let geo = HomographyConfig { crop_ratio: 0.85, rotation_range: [0.0, 0.3], perspective_amplitude: 0.1, ..Default::default() };
    let photo = PhotometricConfig { gaussian_noise_sigma: 0.01, blur_kernels: vec![1], channel_shuffle_prob: 0.0, ..Default::default() };
    let mut k = 0u64;
    let mut write_seq = |name: String, viewpoint: bool| -> Result<()> {
        k += 1;
        let seq_dir = dir.join(&name);
        std::fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
        let reference = scene(height, width, seed::derive(seed, &[k, 0]));
        reference.save(&seq_dir.join("1.png"))?;
        for t in 2..=6u64 {
            let s = seed::derive(seed, &[k, t]);
            let (img, h) = if viewpoint {
                let h = sample_homography(&geo, height, width, s)?;
                (warp_image(&reference, &h, height, width).0, h)
            } else {
                (reference.clone(), Homography::identity())
            };
            let img = apply_photometric(&img, &photo, seed::derive(s, &[1]));
            img.save(&seq_dir.join(format!("{t}.png")))?;
            write_homography(&seq_dir.join(format!("H_1_{t}")), &h)?;
        }
        Ok(())
    };
    for i in 0..illumination {
        write_seq(format!("i_synth{i:03}"), false)?;
    }
    for i in 0..viewpoint {
        write_seq(format!("v_synth{i:03}"), true)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::load_dataset;

    #[test]
    fn scenes_are_deterministic_and_textured() {
        let a = scene(48, 64, 3);
        assert_eq!(a.data, scene(48, 64, 3).data);
        assert_ne!(a.data, scene(48, 64, 4).data);
        let mean = a.data.iter().sum::<f32>() / a.data.len() as f32;
        let var = a.data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.data.len() as f32;
        assert!(var > 0.01, "{var}");
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hpatches_writer_produces_loadable_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_hpatches(dir.path(), 1, 1, 48, 64, 0).unwrap();
        let (seqs, skipped) = load_dataset(dir.path(), None).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].targets.len(), 5);
    }
}
