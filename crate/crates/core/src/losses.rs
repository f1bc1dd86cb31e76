//! Keypoint association and the self-supervised location, descriptor and
//! score losses. All sums over pairs are mean-reduced.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the location loss.
    pub alpha: f64,
    /// Weight of the descriptor loss.
    pub beta: f64,
    /// Weight of the score loss.
    pub lambda: f64,
    /// Association radius ε_uv in pixels.
    pub epsilon_uv: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Negatives within this many pixels of the true match are not mined.
    pub relaxation: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0, lambda: 1.0, epsilon_uv: 4.0, margin: 0.2, relaxation: 8.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss.{name}"), "must be >= 0"));
            }
        }
        if !(self.epsilon_uv > 0.0) {
            return Err(Error::config("loss.epsilon_uv", "must be > 0"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("loss.margin", "must be > 0"));
        }
        if !(self.relaxation >= 0.0) {
            return Err(Error::config("loss.relaxation", "must be >= 0"));
        }
        Ok(())
    }
}

/// Source/target index pairs whose reprojection distance is within ε_uv.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl Association {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_distance(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.distances.iter().sum::<f64>() / self.len() as f64
        }
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Nearest target (lowest index on ties) for every valid warped source
/// point; pairs farther than `eps` are dropped.
pub fn associate(warped: &[[f64; 2]], valid: &[bool], targets: &[[f64; 2]], eps: f64) -> Association {
    let mut out = Association::default();
    if targets.is_empty() {
        return out;
    }
    for (i, (&p, &ok)) in warped.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, &t) in targets.iter().enumerate() {
            let d = dist(p, t);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        if best_d <= eps {
            out.pairs.push((i, best));
            out.distances.push(best_d);
        }
    }
    out
}

fn zero<T: Scalar>() -> Var<T> {
    Var::constant(Tensor::scalar(T::zero()))
}

/// Differentiable `‖p*ᵢ − p̂ᵢ‖` over associated pairs, shape `[L]`.
pub fn pair_distances<T: Scalar>(warped: &Var<T>, targets: &Var<T>, assoc: &Association) -> Var<T> {
    warped.gather_rows(&assoc.sources()).row_distances(&targets.gather_rows(&assoc.targets()))
}

/// Mean reprojection distance between associated points.
pub fn loc_loss<T: Scalar>(warped: &Var<T>, targets: &Var<T>, assoc: &Association) -> Var<T> {
    if assoc.is_empty() {
        return zero();
    }
    pair_distances(warped, targets, assoc).mean()
}

/// Hardest-negative triplet loss.
///
/// Anchor `i` is pulled towards `positives[i]` and pushed from the closest
/// candidate (in descriptor space) whose location lies farther than
/// `relaxation` pixels from `positive_locs[i]`. Anchors without such a
/// candidate are skipped. Negatives are mined on values; the loss is then
/// differentiable through anchors, positives and the chosen candidates.
pub fn triplet_loss<T: Scalar>(
    anchors: &Var<T>,
    positives: &Var<T>,
    positive_locs: &[[f64; 2]],
    candidates: &Var<T>,
    candidate_locs: &[[f64; 2]],
    margin: f64,
    relaxation: f64,
) -> Var<T> {
    let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
    assert_eq!(positives.shape(), &[n, d]);
    assert_eq!(positive_locs.len(), n);
    assert_eq!(candidates.shape()[0], candidate_locs.len());
    let negatives = hardest_negatives(anchors.value(), positive_locs, candidates.value(), candidate_locs, relaxation);
    let (kept, neg_idx): (Vec<usize>, Vec<usize>) =
        negatives.iter().enumerate().filter_map(|(i, n)| n.map(|j| (i, j))).unzip();
    if kept.is_empty() {
        return zero();
    }
    let a = anchors.gather_rows(&kept);
    let d_pos = a.row_distances(&positives.gather_rows(&kept));
    let d_neg = a.row_distances(&candidates.gather_rows(&neg_idx));
    d_pos.sub(&d_neg).add_scalar(margin).relu().mean()
}

/// For each anchor, the index of the closest admissible candidate.
pub fn hardest_negatives<T: Scalar>(
    anchors: &Tensor<T>,
    positive_locs: &[[f64; 2]],
    candidates: &Tensor<T>,
    candidate_locs: &[[f64; 2]],
    relaxation: f64,
) -> Vec<Option<usize>> {
    let d = anchors.dim(1);
    let ad = anchors.data();
    let cd = candidates.data();
    let m = candidates.dim(0);
    (0..anchors.dim(0))
        .map(|i| {
            let a = &ad[i * d..(i + 1) * d];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..m {
                if dist(candidate_locs[j], positive_locs[i]) <= relaxation {
                    continue;
                }
                let c = &cd[j * d..(j + 1) * d];
                let dd: f64 = a.iter().zip(c).map(|(&x, &y)| (x - y).f64().powi(2)).sum();
                if best.is_none_or(|(_, b)| dd < b) {
                    best = Some((j, dd));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Score consistency loss: per pair
/// `(sᵢ + ŝᵢ)/2 · (dᵢ − d̄) + (sᵢ − ŝᵢ)²`, averaged. `d` and `d̄` are
/// differentiable in the locations.
pub fn score_loss<T: Scalar>(
    source_scores: &Var<T>,
    target_scores: &Var<T>,
    warped: &Var<T>,
    targets: &Var<T>,
    assoc: &Association,
) -> Var<T> {
    if assoc.is_empty() {
        return zero();
    }
    let s = source_scores.gather_rows(&assoc.sources());
    let t = target_scores.gather_rows(&assoc.targets());
    let d = pair_distances(warped, targets, assoc);
    let centered = d.add_broadcast(&d.mean().neg());
    let consistency = s.add(&t).scale(0.5).mul(&centered);
    consistency.add(&s.sub(&t).square()).mean()
}

/// Individual loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loc: f64,
    pub desc: f64,
    pub score: f64,
    pub io: f64,
    pub total: f64,
}

/// α·L_loc + β·L_desc + λ·L_score + L_IO with optional terms switched off.
pub fn total_loss<T: Scalar>(
    loc: &Var<T>,
    desc: Option<&Var<T>>,
    score: &Var<T>,
    io: Option<&Var<T>>,
    config: &LossConfig,
) -> Var<T> {
    let mut total = loc.scale(config.alpha).add(&score.scale(config.lambda));
    if let Some(d) = desc {
        total = total.add(&d.scale(config.beta));
    }
    if let Some(io) = io {
        total = total.add(io);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_grad;

    fn var(shape: &[usize], v: &[f64]) -> Var<f64> {
        Var::constant(Tensor::from_vec(shape, v.to_vec()))
    }

    #[test]
    fn association_examples() {
        let pts = [[1.0, 2.0], [5.0, 5.0]];
        let a = associate(&pts, &[true, true], &pts, 4.0);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.mean_distance(), 0.0);
        assert!(associate(&[[0.0, 0.0]], &[true], &[[10.0, 0.0]], 4.0).is_empty());
        let a = associate(&[[0.0, 0.0]], &[true], &[[1.0, 0.0], [3.0, 0.0]], 4.0);
        assert_eq!((a.pairs.clone(), a.distances.clone()), (vec![(0, 0)], vec![1.0]));
        // Ties go to the lower index; invalid sources are skipped.
        let a = associate(&[[0.0, 0.0], [9.0, 9.0]], &[true, false], &[[1.0, 0.0], [-1.0, 0.0]], 4.0);
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn loc_loss_examples() {
        let w = var(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let t = var(&[2, 2], &[1.0, 0.0, 0.0, 3.0]);
        let assoc = Association { pairs: vec![(0, 0), (1, 1)], distances: vec![1.0, 3.0] };
        assert!((loc_loss(&w, &t, &assoc).item() - 2.0).abs() < 1e-12);
        assert_eq!(loc_loss(&w, &w, &assoc).item(), 0.0);
        assert_eq!(loc_loss(&w, &t, &Association::default()).item(), 0.0);
    }

    #[test]
    fn triplet_example_and_inactive_hinge() {
        // 1-D descriptors: anchor 0, positive 0.1, negative 0.15 away.
        let a = var(&[1, 1], &[0.0]);
        let p = var(&[1, 1], &[0.1]);
        let c = var(&[2, 1], &[0.1, 0.15]);
        let l = triplet_loss(&a, &p, &[[0.0, 0.0]], &c, &[[0.0, 0.0], [50.0, 0.0]], 0.2, 8.0);
        assert!((l.item() - 0.15).abs() < 1e-12);
        let far = var(&[2, 1], &[0.0, 0.9]);
        let l = triplet_loss(&a, &a, &[[0.0, 0.0]], &far, &[[0.0, 0.0], [50.0, 0.0]], 0.2, 8.0);
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn triplet_skips_anchors_without_negatives() {
        let a = var(&[1, 1], &[0.0]);
        let l = triplet_loss(&a, &a, &[[0.0, 0.0]], &a, &[[3.0, 0.0]], 0.2, 8.0);
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn score_loss_examples() {
        let w = var(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let t = var(&[2, 2], &[1.0, 0.0, 3.0, 0.0]);
        let assoc = Association { pairs: vec![(0, 0), (1, 1)], distances: vec![1.0, 3.0] };
        let half = var(&[2], &[0.5, 0.5]);
        assert!(score_loss(&half, &half, &w, &t, &assoc).item().abs() < 1e-12);
        let one = Association { pairs: vec![(0, 0)], distances: vec![1.0] };
        let l = score_loss(&var(&[1], &[0.8]), &var(&[1], &[0.6]), &w, &t, &one);
        assert!((l.item() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let one = var(&[1], &[1.0]);
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&one, Some(&one), &one, Some(&one), &cfg).item(), 5.0);
        assert_eq!(total_loss(&one, Some(&one), &one, None, &cfg).item(), 4.0);
        let z = var(&[1], &[0.0]);
        assert_eq!(total_loss(&z, Some(&z), &z, Some(&z), &cfg).item(), 0.0);
    }

    #[test]
    fn loss_gradients() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 4.0, 4.5, 7.0, 1.0]);
        let assoc = Association { pairs: vec![(0, 1), (2, 0), (1, 2)], distances: vec![0.0; 3] };
        let tv = Var::constant(t.clone());
        let w = Tensor::from_vec(&[3, 2], vec![3.0, 4.0, 5.5, 1.0, 2.0, 1.5]);
        check_grad(&w, |v| loc_loss(v, &tv, &assoc), 1e-6);
        let s = Var::constant(Tensor::from_vec(&[3], vec![0.2, 0.7, 0.4]));
        check_grad(&w, |v| score_loss(&s, &s, v, &tv, &assoc), 1e-6);
        let wv = Var::constant(w.clone());
        check_grad(&Tensor::from_vec(&[3], vec![0.3, 0.9, 0.5]), |v| score_loss(v, &s, &wv, &tv, &assoc), 1e-6);
    }
}
