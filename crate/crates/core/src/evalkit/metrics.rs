//! Detector and descriptor metrics on a pair of keypoint sets related by a
//! ground-truth homography.

use crate::geometry::{in_bounds_mask, Homography};
use crate::tensor::{gemm, MatRef};

/// Outcome of the symmetric repeatability computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Repeatability {
    /// Mean of the two directional ratios; `None` when either side has no
    /// in-view points.
    pub repeatability: Option<f64>,
    /// Mean distance over correct associations of both directions; `None`
    /// when there are none.
    pub localization_error: Option<f64>,
    pub correct: usize,
}

/// Points of `a` whose image under `h` lands inside a `height × width` frame.
pub fn in_view(points: &[[f64; 2]], h: &Homography, height: usize, width: usize) -> (Vec<usize>, Vec<[f64; 2]>) {
    let mut idx = Vec::new();
    let mut warped = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        if let Some(q) = h.apply(p) {
            if in_bounds_mask(&[q], height, width)[0] {
                idx.push(i);
                warped.push(q);
            }
        }
    }
    (idx, warped)
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Uniform bucket grid over points for radius queries.
struct Grid {
    cell: f64,
    buckets: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: [f64; 2], cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Nearest point within `radius` (≤ cell), lowest index on ties.
    fn nearest_within(&self, points: &[[f64; 2]], q: [f64; 2], radius: f64) -> Option<(usize, f64)> {
        let (kx, ky) = Self::key(q, self.cell);
        let r2 = radius * radius;
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy)) else { continue };
                for &j in bucket {
                    let d2 = sq_dist(points[j], q);
                    if d2 > r2 {
                        continue;
                    }
                    match best {
                        Some((bj, bd)) if d2 > bd || (d2 == bd && j > bj) => {}
                        _ => best = Some((j, d2)),
                    }
                }
            }
        }
        best.map(|(j, d2)| (j, d2.sqrt()))
    }
}

/// Counts, for each warped point, whether the closest of `targets` lies
/// within `tau`, returning the number of hits and their distances.
fn directional(warped: &[[f64; 2]], targets: &[[f64; 2]], tau: f64) -> (usize, Vec<f64>) {
    let grid = Grid::new(targets, tau.max(1e-9));
    let mut dists = Vec::new();
    for &q in warped {
        if let Some((_, d)) = grid.nearest_within(targets, q, tau) {
            dists.push(d);
        }
    }
    (dists.len(), dists)
}

/// Symmetric repeatability and localisation error.
///
/// `h` maps image A (`size_a`) into image B (`size_b`). A point of A counts
/// as in-view when its warp falls inside B, and vice versa through `h⁻¹`.
/// Each in-view point is associated with the closest in-view point of the
/// other image; it is correct when that distance is at most `tau`.
pub fn repeatability(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    tau: f64,
) -> Repeatability {
    let hinv = h.inverse();
    let (ia, a_in_b) = in_view(a, h, size_b.0, size_b.1);
    let (ib, b_in_a) = in_view(b, &hinv, size_a.0, size_a.1);
    let a_kept: Vec<[f64; 2]> = ia.iter().map(|&i| a[i]).collect();
    let b_kept: Vec<[f64; 2]> = ib.iter().map(|&i| b[i]).collect();
    let (c_ab, d_ab) = directional(&a_in_b, &b_kept, tau);
    let (c_ba, d_ba) = directional(&b_in_a, &a_kept, tau);
    let repeat = if ia.is_empty() || ib.is_empty() {
        None
    } else {
        Some(0.5 * (c_ab as f64 / ia.len() as f64 + c_ba as f64 / ib.len() as f64))
    };
    let correct = c_ab + c_ba;
    let loc = (correct > 0).then(|| d_ab.iter().chain(&d_ba).sum::<f64>() / correct as f64);
    Repeatability { repeatability: repeat, localization_error: loc, correct }
}

/// Squared Euclidean distance matrix `‖aᵢ − bⱼ‖²` (row-major `na × nb`).
pub fn descriptor_distances(fa: &[f32], fb: &[f32], dim: usize) -> Vec<f64> {
    let na = fa.len() / dim;
    let nb = fb.len() / dim;
    let a: Vec<f64> = fa.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = fb.iter().map(|&v| v as f64).collect();
    let mut dots = vec![0.0; na * nb];
    gemm(MatRef::new(&a, na, dim), MatRef::t(&b, dim, nb), &mut dots, 1.0, 0.0);
    let norm = |m: &[f64]| m.chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>()).collect::<Vec<_>>();
    let (na2, nb2) = (norm(&a), norm(&b));
    for i in 0..na {
        for j in 0..nb {
            let v = &mut dots[i * nb + j];
            *v = (na2[i] + nb2[j] - 2.0 * *v).max(0.0);
        }
    }
    dots
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|b| b.0)
}

/// Mutual nearest neighbours in descriptor space, ordered by `a` index.
pub fn match_descriptors(fa: &[f32], fb: &[f32], dim: usize) -> Vec<(usize, usize)> {
    if dim == 0 || fa.is_empty() || fb.is_empty() {
        return Vec::new();
    }
    let (na, nb) = (fa.len() / dim, fb.len() / dim);
    let d = descriptor_distances(fa, fb, dim);
    let a_to_b: Vec<usize> = (0..na).map(|i| argmin(d[i * nb..(i + 1) * nb].iter().copied()).unwrap()).collect();
    let b_to_a: Vec<usize> = (0..nb).map(|j| argmin((0..na).map(|i| d[i * nb + j])).unwrap()).collect();
    a_to_b.iter().enumerate().filter(|&(i, &j)| b_to_a[j] == i).map(|(i, &j)| (i, j)).collect()
}

/// Symmetric matching score: per direction, the fraction of in-view
/// keypoints whose mutual match is also in-view and reprojects within
/// `tau`; the two ratios are averaged. Zero when either side has no
/// in-view points.
pub fn matching_score(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    matches: &[(usize, usize)],
    h: &Homography,
    size_a: (usize, usize),
    size_b: (usize, usize),
    tau: f64,
) -> f64 {
    let hinv = h.inverse();
    let (ia, _) = in_view(a, h, size_b.0, size_b.1);
    let (ib, _) = in_view(b, &hinv, size_a.0, size_a.1);
    if ia.is_empty() || ib.is_empty() {
        return 0.0;
    }
    let mut a_in = vec![false; a.len()];
    ia.iter().for_each(|&i| a_in[i] = true);
    let mut b_in = vec![false; b.len()];
    ib.iter().for_each(|&i| b_in[i] = true);
    let tau2 = tau * tau;
    let (mut c_ab, mut c_ba) = (0usize, 0usize);
    for &(i, j) in matches {
        if !(a_in[i] && b_in[j]) {
            continue;
        }
        if h.apply(a[i]).is_some_and(|q| sq_dist(q, b[j]) <= tau2) {
            c_ab += 1;
        }
        if hinv.apply(b[j]).is_some_and(|q| sq_dist(q, a[i]) <= tau2) {
            c_ba += 1;
        }
    }
    0.5 * (c_ab as f64 / ia.len() as f64 + c_ba as f64 / ib.len() as f64)
}

/// Whether the mean corner error of `estimate` against `truth` is within
/// each threshold. A failed estimate is wrong at every threshold.
pub fn homography_accuracy(
    estimate: Option<&Homography>,
    truth: &Homography,
    height: usize,
    width: usize,
    thresholds: &[f64],
) -> Vec<bool> {
    match estimate {
        None => vec![false; thresholds.len()],
        Some(e) => {
            let err = e.corner_error(truth, height, width);
            thresholds.iter().map(|&t| err <= t).collect()
        }
    }
}

/// Exhaustive reference versions used to validate the fast paths.
pub mod brute_force {
    use super::*;

    fn nearest(q: [f64; 2], pts: &[[f64; 2]]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &p) in pts.iter().enumerate() {
            let d2 = sq_dist(p, q);
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((j, d2));
            }
        }
        best.map(|(j, d2)| (j, d2.sqrt()))
    }

    pub fn repeatability(
        a: &[[f64; 2]],
        b: &[[f64; 2]],
        h: &Homography,
        size_a: (usize, usize),
        size_b: (usize, usize),
        tau: f64,
    ) -> Repeatability {
        let hinv = h.inverse();
        let inside = |p: [f64; 2], s: (usize, usize)| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < s.1 as f64 && p[1] < s.0 as f64;
        let mut a_view = Vec::new();
        let mut a_warp = Vec::new();
        for &p in a {
            if let Some(q) = h.apply(p).filter(|&q| inside(q, size_b)) {
                a_view.push(p);
                a_warp.push(q);
            }
        }
        let mut b_view = Vec::new();
        let mut b_warp = Vec::new();
        for &p in b {
            if let Some(q) = hinv.apply(p).filter(|&q| inside(q, size_a)) {
                b_view.push(p);
                b_warp.push(q);
            }
        }
        let mut dists = Vec::new();
        let mut count = |warped: &[[f64; 2]], targets: &[[f64; 2]]| {
            let mut c = 0;
            for &q in warped {
                if let Some((_, d)) = nearest(q, targets) {
                    if d * d <= tau * tau {
                        c += 1;
                        dists.push(d);
                    }
                }
            }
            c
        };
        let c_ab = count(&a_warp, &b_view);
        let c_ba = count(&b_warp, &a_view);
        let repeat = (!a_view.is_empty() && !b_view.is_empty())
            .then(|| 0.5 * (c_ab as f64 / a_view.len() as f64 + c_ba as f64 / b_view.len() as f64));
        let correct = c_ab + c_ba;
        let loc = (correct > 0).then(|| dists.iter().sum::<f64>() / correct as f64);
        Repeatability { repeatability: repeat, localization_error: loc, correct }
    }

    pub fn match_descriptors(fa: &[f32], fb: &[f32], dim: usize) -> Vec<(usize, usize)> {
        let (na, nb) = (fa.len() / dim, fb.len() / dim);
        let dist = |i: usize, j: usize| -> f64 {
            fa[i * dim..(i + 1) * dim]
                .iter()
                .zip(&fb[j * dim..(j + 1) * dim])
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum()
        };
        let mut out = Vec::new();
        for i in 0..na {
            let j = (0..nb).min_by(|&x, &y| dist(i, x).total_cmp(&dist(i, y)).then(x.cmp(&y)));
            let Some(j) = j else { continue };
            let back = (0..na).min_by(|&x, &y| dist(x, j).total_cmp(&dist(y, j)).then(x.cmp(&y)));
            if back == Some(i) {
                out.push((i, j));
            }
        }
        out
    }

    pub fn matching_score(
        a: &[[f64; 2]],
        b: &[[f64; 2]],
        matches: &[(usize, usize)],
        h: &Homography,
        size_a: (usize, usize),
        size_b: (usize, usize),
        tau: f64,
    ) -> f64 {
        let hinv = h.inverse();
        let inside = |p: [f64; 2], s: (usize, usize)| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < s.1 as f64 && p[1] < s.0 as f64;
        let a_ok = |i: usize| h.apply(a[i]).is_some_and(|q| inside(q, size_b));
        let b_ok = |j: usize| hinv.apply(b[j]).is_some_and(|q| inside(q, size_a));
        let na = (0..a.len()).filter(|&i| a_ok(i)).count();
        let nb = (0..b.len()).filter(|&j| b_ok(j)).count();
        if na == 0 || nb == 0 {
            return 0.0;
        }
        let mut c_ab = 0;
        let mut c_ba = 0;
        for &(i, j) in matches {
            if a_ok(i) && b_ok(j) {
                let q = h.apply(a[i]).unwrap();
                if sq_dist(q, b[j]) <= tau * tau {
                    c_ab += 1;
                }
                let r = hinv.apply(b[j]).unwrap();
                if sq_dist(r, a[i]) <= tau * tau {
                    c_ba += 1;
                }
            }
        }
        0.5 * (c_ab as f64 / na as f64 + c_ba as f64 / nb as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZE: (usize, usize) = (100, 100);

    #[test]
    fn identical_sets_are_fully_repeatable() {
        let pts = [[10.0, 10.0], [50.5, 20.0], [90.0, 80.0]];
        let r = repeatability(&pts, &pts, &Homography::identity(), SIZE, SIZE, 3.0);
        assert_eq!(r.repeatability, Some(1.0));
        assert_eq!(r.localization_error, Some(0.0));
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let a = [[10.0, 10.0], [20.0, 20.0]];
        let b = [[70.0, 70.0], [90.0, 10.0]];
        let r = repeatability(&a, &b, &Homography::identity(), SIZE, SIZE, 3.0);
        assert_eq!(r.repeatability, Some(0.0));
        assert_eq!(r.localization_error, None);
    }

    #[test]
    fn three_of_four_within_threshold() {
        let a = [[10.0, 10.0], [30.0, 30.0], [50.0, 50.0], [70.0, 70.0]];
        let b = [[11.0, 10.0], [30.0, 32.0], [50.0, 50.0], [90.0, 90.0]];
        let r = repeatability(&a, &b, &Homography::identity(), SIZE, SIZE, 3.0);
        assert_eq!(r.repeatability, Some(0.75));
        assert_eq!(r.localization_error, Some(1.0));
    }

    #[test]
    fn mutual_matching_excludes_one_sided_neighbours() {
        // a0 and a1 both prefer b0; b0 prefers a1, so only (1, 0) survives.
        let fa = [0.0f32, 0.9, 5.0];
        let fb = [1.0f32, 5.1];
        assert_eq!(match_descriptors(&fa, &fb, 1), vec![(1, 0), (2, 1)]);
        let eye = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let perm = [0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(match_descriptors(&eye, &perm, 3), vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn matching_score_bounded_by_repeatability() {
        let a = [[10.0, 10.0], [30.0, 30.0], [50.0, 50.0], [70.0, 70.0]];
        let b = [[11.0, 10.0], [30.0, 32.0], [50.0, 50.0], [90.0, 90.0]];
        let id = Homography::identity();
        let m = [(0, 0), (1, 1), (2, 2), (3, 3)];
        let ms = matching_score(&a, &b, &m, &id, SIZE, SIZE, 3.0);
        assert_eq!(ms, 0.75);
        assert_eq!(matching_score(&a, &b, &[], &id, SIZE, SIZE, 3.0), 0.0);
    }

    #[test]
    fn corner_accuracy_thresholds() {
        let gt = Homography::identity();
        let est = Homography::translation(2.0, 0.0);
        assert_eq!(homography_accuracy(Some(&est), &gt, 240, 320, &[1.0, 3.0, 5.0]), vec![false, true, true]);
        assert_eq!(homography_accuracy(Some(&gt), &gt, 240, 320, &[1.0, 3.0, 5.0]), vec![true; 3]);
        assert_eq!(homography_accuracy(None, &gt, 240, 320, &[1.0, 3.0, 5.0]), vec![false; 3]);
    }
}
