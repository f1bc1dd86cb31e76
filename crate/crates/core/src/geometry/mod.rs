//! Homographies, random homography sampling and point/image warping.
//!
//! Points are `(u, v)` = (column, row) with pixel centres at integer
//! coordinates, so a `W`-wide image spans `u ∈ [0, W − 1]`.

mod photometric;
mod warp;

pub use photometric::{apply_photometric, PhotometricConfig};
pub use warp::warp_image;

use std::f64::consts::FRAC_PI_4;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Determinant magnitude below which a matrix is treated as singular.
pub const MIN_DET: f64 = 1e-8;
/// Homogeneous scale below which a point is considered at infinity.
pub const MIN_W: f64 = 1e-12;

/// 3×3 projective transform with `m[(2, 2)] == 1` whenever possible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Validates invertibility and normalises the last entry.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite entry".into()));
        }
        let h = Self::normalized(m);
        let det = h.m.determinant();
        if det.abs() <= MIN_DET {
            return Err(Error::Degenerate(format!("|det| = {:.3e}", det.abs())));
        }
        Ok(h)
    }

    fn normalized(m: Matrix3<f64>) -> Self {
        let s = m[(2, 2)];
        if s.abs() > 1e-12 {
            Self { m: m / s }
        } else {
            Self { m }
        }
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self { m: Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0) }
    }

    /// Rotation by `theta` (from +u towards +v) about `center`.
    pub fn rotation_about(theta: f64, center: [f64; 2]) -> Self {
        let (s, c) = theta.sin_cos();
        let r = Self { m: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0) };
        Self::translation(center[0], center[1]) * r * Self::translation(-center[0], -center[1])
    }

    /// Isotropic zoom by `s` about `center`.
    pub fn zoom_about(s: f64, center: [f64; 2]) -> Self {
        Self::translation(center[0], center[1]) * Self::scaling(s, s) * Self::translation(-center[0], -center[1])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let inv = self.m.try_inverse().expect("homography validated as invertible");
        Self::normalized(inv)
    }

    /// Maps one point; `None` when it lands on the plane at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let q = self.m * Vector3::new(p[0], p[1], 1.0);
        if q.z.abs() < MIN_W {
            return None;
        }
        Some([q.x / q.z, q.y / q.z])
    }

    /// Homogeneous scale of the mapped point.
    pub fn w(&self, p: [f64; 2]) -> f64 {
        self.m[(2, 0)] * p[0] + self.m[(2, 1)] * p[1] + self.m[(2, 2)]
    }

    /// Re-expresses the transform for images rescaled by `(sx, sy)` on both
    /// sides: `S · H · S⁻¹`.
    pub fn rescaled(&self, sx: f64, sy: f64) -> Self {
        let s = Self::scaling(sx, sy);
        let s_inv = Self::scaling(1.0 / sx, 1.0 / sy);
        s * *self * s_inv
    }

    /// Mean distance between the images of the four corners under `self`
    /// and `other`, for an image of `height × width` pixels.
    pub fn corner_error(&self, other: &Homography, height: usize, width: usize) -> f64 {
        let corners = image_corners(height, width);
        corners
            .iter()
            .map(|&c| match (self.apply(c), other.apply(c)) {
                (Some(a), Some(b)) => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
                _ => f64::INFINITY,
            })
            .sum::<f64>()
            / 4.0
    }
}

impl Mul for Homography {
    type Output = Homography;

    /// `a * b` applies `b` first.
    fn mul(self, rhs: Homography) -> Homography {
        Homography::normalized(self.m * rhs.m)
    }
}

/// Corners `(0,0), (W−1,0), (0,H−1), (W−1,H−1)`.
pub fn image_corners(height: usize, width: usize) -> [[f64; 2]; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

pub fn image_center(height: usize, width: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// Maps points; invalid entries (at infinity) are reported in the mask and
/// set to NaN.
pub fn warp_points(points: &[[f64; 2]], h: &Homography) -> (Vec<[f64; 2]>, Vec<bool>) {
    points
        .iter()
        .map(|&p| match h.apply(p) {
            Some(q) => (q, true),
            None => ([f64::NAN, f64::NAN], false),
        })
        .unzip()
}

/// `0 ≤ u < W` and `0 ≤ v < H`.
pub fn in_bounds_mask(points: &[[f64; 2]], height: usize, width: usize) -> Vec<bool> {
    points
        .iter()
        .map(|p| p[0] >= 0.0 && p[0] < width as f64 && p[1] >= 0.0 && p[1] < height as f64)
        .collect()
}

/// Differentiable warp of `[N, 2]` points. Points at infinity map to zero,
/// receive no gradient and are flagged `false` in the returned mask.
pub fn warp_points_var<T: Scalar>(points: &Var<T>, h: &Homography) -> (Var<T>, Vec<bool>) {
    let n = points.shape()[0];
    assert_eq!(points.shape(), &[n, 2], "warp_points expects [N, 2]");
    let m: [T; 9] = h.to_row_major().map(T::lit);
    let pd = points.value().data();
    let mut out = vec![T::zero(); 2 * n];
    // Per point: (a, b, w) homogeneous image.
    let mut hom = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (pd[2 * i], pd[2 * i + 1]);
        let a = m[0] * x + m[1] * y + m[2];
        let b = m[3] * x + m[4] * y + m[5];
        let w = m[6] * x + m[7] * y + m[8];
        let ok = w.abs().f64() >= MIN_W;
        if ok {
            out[2 * i] = a / w;
            out[2 * i + 1] = b / w;
        }
        hom.push((a, b, w));
        valid.push(ok);
    }
    let mask = valid.clone();
    let var = Var::from_op(Tensor::from_vec(&[n, 2], out), vec![points.clone()], move |bw| {
        let g = bw.grad.data();
        let mut dp = vec![T::zero(); 2 * n];
        for (i, &(a, b, w)) in hom.iter().enumerate() {
            if !valid[i] {
                continue;
            }
            let w2 = w * w;
            let (gu, gv) = (g[2 * i], g[2 * i + 1]);
            // d(a/w)/dx = (m0 w − a m6) / w², and so on.
            let dux = (m[0] * w - a * m[6]) / w2;
            let duy = (m[1] * w - a * m[7]) / w2;
            let dvx = (m[3] * w - b * m[6]) / w2;
            let dvy = (m[4] * w - b * m[7]) / w2;
            dp[2 * i] = gu * dux + gv * dvx;
            dp[2 * i + 1] = gu * duy + gv * dvy;
        }
        vec![Some(Tensor::from_vec(&[n, 2], dp))]
    });
    (var, mask)
}

/// Ranges for random homography sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomographyConfig {
    /// Side ratio of the source crop shown in the target, in `(0, 1]`.
    pub crop_ratio: f64,
    pub scale_range: [f64; 2],
    /// Rotation magnitude range in radians; the sign is drawn separately.
    pub rotation_range: [f64; 2],
    /// Bound on the projective terms in centre-normalised coordinates.
    pub perspective_amplitude: f64,
    /// Random shift inside the margin left by the crop.
    pub translation: bool,
}

impl Default for HomographyConfig {
    fn default() -> Self {
        Self {
            crop_ratio: 0.7,
            scale_range: [0.8, 1.2],
            rotation_range: [0.0, FRAC_PI_4],
            perspective_amplitude: 0.2,
            translation: true,
        }
    }
}

impl HomographyConfig {
    /// A configuration that always samples the identity.
    pub fn identity() -> Self {
        Self {
            crop_ratio: 1.0,
            scale_range: [1.0, 1.0],
            rotation_range: [0.0, 0.0],
            perspective_amplitude: 0.0,
            translation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::config("homography.crop_ratio", "must lie in (0, 1]"));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(self.scale_range) || self.scale_range[0] <= 0.0 {
            return Err(Error::config("homography.scale_range", "must be a positive, non-empty [lo, hi]"));
        }
        if !ordered(self.rotation_range) || self.rotation_range[0] < 0.0 {
            return Err(Error::config("homography.rotation_range", "must be a non-empty [lo, hi] with lo >= 0"));
        }
        if !(self.perspective_amplitude >= 0.0 && self.perspective_amplitude < 1.0) {
            return Err(Error::config("homography.perspective_amplitude", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

const MAX_SAMPLE_ATTEMPTS: usize = 100;

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Draws crop → scale → rotation → perspective → translation about the
/// image centre. Source pixels map to target pixels of the same size.
pub fn sample_homography(config: &HomographyConfig, height: usize, width: usize, seed: u64) -> Result<Homography> {
    if height <= 16 || width <= 16 {
        return Err(Error::Shape(format!("image {height}x{width} too small for homography sampling")));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = image_center(height, width);
    let corners = image_corners(height, width);
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let r = config.crop_ratio;
        let crop = Homography::zoom_about(1.0 / r, center);
        let scale = Homography::zoom_about(sample_range(&mut rng, config.scale_range), center);
        let magnitude = sample_range(&mut rng, config.rotation_range);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rot = Homography::rotation_about(sign * magnitude, center);
        let a = config.perspective_amplitude;
        let (px, py) = if a > 0.0 { (rng.random_range(-a..=a), rng.random_range(-a..=a)) } else { (0.0, 0.0) };
        let (hx, hy) = (width as f64 / 2.0, height as f64 / 2.0);
        let to_norm = Homography::scaling(1.0 / hx, 1.0 / hy) * Homography::translation(-center[0], -center[1]);
        let persp_norm = Homography { m: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0) };
        let persp = if px == 0.0 && py == 0.0 { Homography::identity() } else { to_norm.inverse() * persp_norm * to_norm };
        let (tx, ty) = if config.translation && r < 1.0 {
            let mx = (1.0 - r) * width as f64 / (2.0 * r);
            let my = (1.0 - r) * height as f64 / (2.0 * r);
            (rng.random_range(-mx..=mx), rng.random_range(-my..=my))
        } else {
            (0.0, 0.0)
        };
        let trans = Homography::translation(tx, ty);
        let h = trans * persp * rot * scale * crop;
        let det_ok = h.m.determinant().abs() > MIN_DET;
        let w_ok = corners.iter().all(|&c| h.w(c) > MIN_W);
        if det_ok && w_ok {
            return Ok(h);
        }
    }
    Err(Error::Degenerate(format!("no valid sample after {MAX_SAMPLE_ATTEMPTS} attempts")))
}
