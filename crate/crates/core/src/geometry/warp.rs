use crate::raster::Image;

use super::Homography;

/// Slack for treating a back-projected coordinate as inside the source.
const EDGE_EPS: f64 = 1e-6;

/// Resamples `image` into a `height × width` frame where the output pixel
/// `q` takes the bilinear source value at `H⁻¹ q`. Pixels that fall outside
/// the source are zero and `false` in the returned mask.
pub fn warp_image(image: &Image, h: &Homography, height: usize, width: usize) -> (Image, Vec<bool>) {
    let inv = h.inverse();
    let m = inv.to_row_major();
    let mut out = Image::new(image.channels, height, width);
    let mut mask = vec![false; height * width];
    let (sw, sh) = (image.width as f64, image.height as f64);
    let plane = image.plane_len();
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let w = m[6] * xf + m[7] * yf + m[8];
            if w.abs() < super::MIN_W {
                continue;
            }
            let mut sx = (m[0] * xf + m[1] * yf + m[2]) / w;
            let mut sy = (m[3] * xf + m[4] * yf + m[5]) / w;
            if sx < -EDGE_EPS || sy < -EDGE_EPS || sx > sw - 1.0 + EDGE_EPS || sy > sh - 1.0 + EDGE_EPS {
                continue;
            }
            sx = sx.clamp(0.0, sw - 1.0);
            sy = sy.clamp(0.0, sh - 1.0);
            let x0 = (sx.floor() as usize).min(image.width.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(image.height.saturating_sub(2));
            let x1 = (x0 + 1).min(image.width - 1);
            let y1 = (y0 + 1).min(image.height - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            let idx = y * width + x;
            mask[idx] = true;
            for c in 0..image.channels {
                let src = &image.data[c * plane..(c + 1) * plane];
                let v00 = src[y0 * image.width + x0];
                let v01 = src[y0 * image.width + x1];
                let v10 = src[y1 * image.width + x0];
                let v11 = src[y1 * image.width + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.data[c * height * width + idx] = top + (bot - top) * fy;
            }
        }
    }
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::image_center;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_keeps_image() {
        let img = Image::from_fn(3, 6, 7, |c, y, x| (c * 100 + y * 10 + x) as f32 / 300.0);
        let (out, mask) = warp_image(&img, &Homography::identity(), 6, 7);
        assert!(out.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn full_width_shift_empties_frame() {
        let img = Image::filled(1, 5, 8, 1.0);
        let (out, mask) = warp_image(&img, &Homography::translation(8.0, 0.0), 5, 8);
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let img = Image::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let h = Homography::rotation_about(FRAC_PI_2, image_center(4, 4));
        let (out, mask) = warp_image(&img, &h, 4, 4);
        assert!(mask.iter().all(|&m| m));
        // Source (u, v) lands at (3 − v, u) for a +90° turn about (1.5, 1.5).
        for v in 0..4 {
            for u in 0..4 {
                assert!((out.get(0, u, 3 - v) - img.get(0, v, u)).abs() < 1e-4);
            }
        }
    }
}
