//! Robust homography estimation: normalised DLT inside seeded RANSAC.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 5000, threshold: 3.0, confidence: 0.9995 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("eval.ransac.max_iterations", "must be >= 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("eval.ransac.threshold", "must be > 0"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("eval.ransac.confidence", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Estimated model with its inlier mask.
#[derive(Clone, Debug)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Similarity that moves the centroid to the origin and sets the mean
/// distance from it to √2.
fn normalizer(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0] / n, y + p[1] / n));
    let mean = points.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 1e-12 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply3(m: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
    [(m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w, (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w]
}

/// Least-squares homography from `n ≥ 4` correspondences (direct linear
/// transform on Hartley-normalised points).
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::Estimation(format!("need at least 4 correspondences, got {n}")));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let [x, y] = apply3(&ts, src[i]);
        let [u, v] = apply3(&td, dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    let (k, _) = svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &s)| if s < b.1 { (i, s) } else { b });
    let h = vt.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Degenerate("normaliser not invertible".into()))?;
    let m = td_inv * hn * ts;
    if !m.iter().all(|v| v.is_finite()) || m.norm() < 1e-300 {
        return Err(Error::Degenerate("DLT produced a null homography".into()));
    }
    Homography::new(m)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).hypot(b[1] - a[1])) * ((c[0] - a[0]).hypot(c[1] - a[1]));
    cross.abs() <= 1e-9 * scale.max(1e-12)
}

fn degenerate_sample(p: &[[f64; 2]; 4]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| p[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

fn reprojection_inliers(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    let t2 = threshold * threshold;
    src.iter()
        .zip(dst)
        .map(|(&s, &d)| h.apply(s).is_some_and(|q| (q[0] - d[0]).powi(2) + (q[1] - d[1]).powi(2) <= t2))
        .collect()
}

/// RANSAC over minimal 4-point samples with an adaptive iteration bound,
/// followed by a least-squares refit on the inliers.
pub fn estimate_homography(src: &[[f64; 2]], dst: &[[f64; 2]], config: &RansacConfig, seed: u64) -> Result<RansacResult> {
    config.validate()?;
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::Estimation(format!("need at least 4 correspondences, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut bound = config.max_iterations;
    let mut iter = 0;
    while iter < bound {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s = [src[idx.index(0)], src[idx.index(1)], src[idx.index(2)], src[idx.index(3)]];
        let d = [dst[idx.index(0)], dst[idx.index(1)], dst[idx.index(2)], dst[idx.index(3)]];
        if degenerate_sample(&s) || degenerate_sample(&d) {
            continue;
        }
        let Ok(h) = fit_homography(&s, &d) else { continue };
        let mask = reprojection_inliers(&h, src, dst, config.threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if count >= 4 && best.as_ref().is_none_or(|b| count > b.2) {
            let w = count as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            if denom < 0.0 {
                let needed = ((1.0 - config.confidence).ln() / denom).ceil();
                bound = bound.min(needed.max(1.0) as usize).max(iter);
            } else {
                bound = iter;
            }
            best = Some((h, mask, count));
        }
    }
    let (h, mask, count) = best.ok_or_else(|| Error::Estimation("no non-degenerate hypothesis with 4 inliers".into()))?;
    let (is, id): (Vec<[f64; 2]>, Vec<[f64; 2]>) = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (src[i], dst[i])).unzip();
    let refined = fit_homography(&is, &id).ok().map(|r| {
        let m = reprojection_inliers(&r, src, dst, config.threshold);
        (r, m)
    });
    let (homography, inliers) = match refined {
        Some((r, m)) if m.iter().filter(|&&b| b).count() >= count => (r, m),
        _ => (h, mask),
    };
    Ok(RansacResult { homography, inliers, iterations: iter })
}
