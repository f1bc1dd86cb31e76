//! HPatches-protocol evaluation: reciprocal descriptor matching, RANSAC
//! homography estimation, repeatability, localisation error, homography
//! accuracy and matching score, aggregated per sequence and per subset.

pub mod hpatches;
pub mod metrics;
pub mod ransac;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::keypoints::KeypointSet;
use crate::model::KeyPointNet;
use crate::raster::Image;
use crate::seed;

pub use hpatches::{load_dataset, Sequence, Skipped, Subset};
pub use metrics::{homography_accuracy, match_descriptors, matching_score, repeatability, Repeatability};
pub use ransac::{estimate_homography, fit_homography, RansacConfig, RansacResult};
pub use report::{EvalReport, MeanStd, Summary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// τ for repeatability and matching score, in pixels.
    pub correctness_threshold: f64,
    pub homography_thresholds: Vec<f64>,
    pub top_k: usize,
    /// Evaluation resolution `[height, width]`.
    pub resolution: [usize; 2],
    pub ransac_max_iters: usize,
    pub ransac_confidence: f64,
    pub ransac_error_threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            correctness_threshold: 3.0,
            homography_thresholds: vec![1.0, 3.0, 5.0],
            top_k: 300,
            resolution: [240, 320],
            ransac_max_iters: 5000,
            ransac_confidence: 0.9995,
            ransac_error_threshold: 3.0,
            seeds: vec![0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.correctness_threshold > 0.0) {
            return Err(Error::config("eval.correctness_threshold", "must be > 0"));
        }
        if self.homography_thresholds.is_empty() || self.homography_thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("eval.homography_thresholds", "must be a nonempty list of positive values"));
        }
        if self.top_k < 4 {
            return Err(Error::config("eval.top_k", "must be >= 4 (a homography needs 4 correspondences)"));
        }
        let [h, w] = self.resolution;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::config("eval.resolution", format!("{h}x{w} must be nonzero and divisible by 8")));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        self.ransac().validate()
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac_max_iters,
            threshold: self.ransac_error_threshold,
            confidence: self.ransac_confidence,
        }
    }
}

/// One image pair at evaluation resolution.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub sequence: String,
    pub subset: Option<Subset>,
    /// Target index within the sequence (2..=6 for HPatches).
    pub index: usize,
    pub source: Image,
    pub target: Image,
    /// Maps source pixels to target pixels.
    pub homography: Homography,
}

/// Metrics of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub sequence: String,
    pub subset: Option<Subset>,
    pub index: usize,
    pub repeatability: Option<f64>,
    pub localization_error: Option<f64>,
    pub matching_score: f64,
    pub matches: usize,
    /// `[seed][threshold]` homography correctness.
    pub correct: Vec<Vec<bool>>,
    /// Mean corner error per seed; `None` when estimation failed.
    pub corner_error: Vec<Option<f64>>,
}

/// Conjugates a homography defined between original-resolution images into
/// one between the resized images: `S_b · H · S_a⁻¹`.
pub fn conjugate_for_resize(h: &Homography, from_a: (usize, usize), from_b: (usize, usize), to: (usize, usize)) -> Homography {
    let sa = Homography::scaling(to.1 as f64 / from_a.1 as f64, to.0 as f64 / from_a.0 as f64);
    let sb = Homography::scaling(to.1 as f64 / from_b.1 as f64, to.0 as f64 / from_b.0 as f64);
    sb * *h * sa.inverse()
}

/// Metrics for two keypoint sets related by `h`.
pub fn evaluate_keypoints(
    a: &KeypointSet,
    b: &KeypointSet,
    h: &Homography,
    size: (usize, usize),
    config: &EvalConfig,
    pair_seed: u64,
) -> (Repeatability, f64, usize, Vec<Vec<bool>>, Vec<Option<f64>>) {
    let tau = config.correctness_threshold;
    let rep = repeatability(&a.points, &b.points, h, size, size, tau);
    let matches = if a.is_empty() || b.is_empty() { Vec::new() } else { match_descriptors(&a.descriptors, &b.descriptors, a.dim) };
    let ms = matching_score(&a.points, &b.points, &matches, h, size, size, tau);
    let src: Vec<[f64; 2]> = matches.iter().map(|&(i, _)| a.points[i]).collect();
    let dst: Vec<[f64; 2]> = matches.iter().map(|&(_, j)| b.points[j]).collect();
    let ransac = config.ransac();
    let mut correct = Vec::with_capacity(config.seeds.len());
    let mut errors = Vec::with_capacity(config.seeds.len());
    for &s in &config.seeds {
        let est = estimate_homography(&src, &dst, &ransac, seed::derive(s, &[pair_seed])).ok();
        let est = est.map(|r| r.homography);
        correct.push(homography_accuracy(est.as_ref(), h, size.0, size.1, &config.homography_thresholds));
        errors.push(est.map(|e| e.corner_error(h, size.0, size.1)));
    }
    (rep, ms, matches.len(), correct, errors)
}

/// Runs detection on both images of every pair and scores them.
pub fn evaluate_pairs(model: &KeyPointNet<f32>, pairs: &[EvalPair], config: &EvalConfig) -> Result<Vec<PairMetrics>> {
    evaluate_pairs_offset(model, pairs, config, 0)
}

/// As [`evaluate_pairs`], numbering pairs from `offset` for RANSAC seeding.
fn evaluate_pairs_offset(model: &KeyPointNet<f32>, pairs: &[EvalPair], config: &EvalConfig, offset: u64) -> Result<Vec<PairMetrics>> {
    config.validate()?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(n, p)| {
            let size = (p.source.height, p.source.width);
            if (p.target.height, p.target.width) != size {
                return Err(Error::Shape("pair images must share a resolution".into()));
            }
            let a = model.detect(&p.source, config.top_k)?;
            let b = model.detect(&p.target, config.top_k)?;
            let (rep, ms, matches, correct, corner_error) = evaluate_keypoints(&a, &b, &p.homography, size, config, offset + n as u64);
            Ok(PairMetrics {
                sequence: p.sequence.clone(),
                subset: p.subset,
                index: p.index,
                repeatability: rep.repeatability,
                localization_error: rep.localization_error,
                matching_score: ms,
                matches,
                correct,
                corner_error,
            })
        })
        .collect()
}

/// Loads a sequence at evaluation resolution with conjugated homographies.
pub fn load_sequence_pairs(seq: &Sequence, resolution: [usize; 2]) -> Result<Vec<EvalPair>> {
    let [h, w] = resolution;
    let reference = Image::load(&seq.reference)?;
    let ref_size = (reference.height, reference.width);
    let source = reference.resize(h, w);
    seq.targets
        .iter()
        .enumerate()
        .map(|(i, (path, hom))| {
            let target = Image::load(path)?;
            let hom = conjugate_for_resize(hom, ref_size, (target.height, target.width), (h, w));
            Ok(EvalPair {
                sequence: seq.name.clone(),
                subset: Some(seq.subset),
                index: i + 2,
                source: source.clone(),
                target: target.resize(h, w),
                homography: hom,
            })
        })
        .collect()
}

/// Full dataset evaluation; sequences are processed in name order and
/// unreadable ones are recorded in the report.
pub fn evaluate_dataset(
    model: &KeyPointNet<f32>,
    root: &std::path::Path,
    subset: Option<Subset>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let (sequences, mut skipped) = load_dataset(root, subset)?;
    let mut pairs_metrics = Vec::new();
    for seq in &sequences {
        let pairs = match load_sequence_pairs(seq, config.resolution) {
            Ok(p) => p,
            Err(e) => {
                skipped.push(Skipped { sequence: seq.name.clone(), reason: e.to_string() });
                continue;
            }
        };
        let offset = pairs_metrics.len() as u64;
        let mut m = evaluate_pairs_offset(model, &pairs, config, offset)?;
        pairs_metrics.append(&mut m);
    }
    Ok(EvalReport::from_pairs(pairs_metrics, skipped, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_conjugation_maps_scaled_points() {
        let h = Homography::translation(10.0, 20.0);
        let c = conjugate_for_resize(&h, (480, 640), (480, 640), (240, 320));
        let p = c.apply([50.0, 60.0]).unwrap();
        assert!((p[0] - 55.0).abs() < 1e-9 && (p[1] - 70.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let bad = EvalConfig { top_k: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EvalConfig { resolution: [241, 320], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
