//! IO-Net: a pointwise 1D residual network that classifies putative
//! keypoint pairs as inliers (target −1) or outliers (target +1). It is only
//! used during training, where its loss is back-propagated into the pair
//! inputs and hence into keypoint locations and descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChannelStats, Var};
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::nn::{join, BatchNorm, Conv2d, ForwardCtx, Module, Param};
use crate::tensor::{Scalar, Tensor};

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoNetConfig {
    pub channels: usize,
    pub residual_blocks: usize,
    /// Number of lowest-score source keypoints mined per image.
    pub k: usize,
}

impl Default for IoNetConfig {
    fn default() -> Self {
        Self { channels: 128, residual_blocks: 4, k: 300 }
    }
}

impl IoNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("ionet.channels", "must be > 0"));
        }
        if self.residual_blocks == 0 {
            return Err(Error::config("ionet.residual_blocks", "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("ionet.k", "must be >= 1"));
        }
        Ok(())
    }
}

/// `{−1, +1}` target: `sign(distance − ε)` with `sign(0) = +1`.
pub fn io_label(distance: f64, eps: f64) -> f64 {
    if distance - eps >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// IO-Net input for one image pair.
pub struct PairBatch<T: Scalar> {
    /// `[5, N]`: normalised source `(u, v)`, normalised matched target
    /// `(u, v)` and descriptor distance.
    pub input: Var<T>,
    pub labels: Vec<f64>,
    pub source_index: Vec<usize>,
    pub target_index: Vec<usize>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Maps pixel `(u, v)` rows to `[−1, 1]` by image size.
pub fn normalize_coords<T: Scalar>(points: &Var<T>, height: usize, width: usize) -> Var<T> {
    let n = points.shape()[0];
    let (sx, sy) = (2.0 / (width as f64 - 1.0), 2.0 / (height as f64 - 1.0));
    let scale = Tensor::from_vec(&[n, 2], (0..n).flat_map(|_| [T::lit(sx), T::lit(sy)]).collect());
    points.mul_const(scale).add_scalar(-1.0)
}

/// Builds IO-Net pairs: the `k` lowest-scoring source keypoints with a
/// valid warp, each matched to its nearest target keypoint in descriptor
/// space. Labels compare the warped source location with the matched
/// target location against `eps`.
#[allow(clippy::too_many_arguments)]
pub fn build_pairs<T: Scalar>(
    source_locs: &Var<T>,
    source_scores: &[f64],
    source_desc: &Var<T>,
    target_locs: &Var<T>,
    target_desc: &Var<T>,
    h: &Homography,
    image_size: (usize, usize),
    k: usize,
    eps: f64,
) -> PairBatch<T> {
    let (height, width) = image_size;
    let sl = source_locs.value().to_f64_vec();
    let mut candidates: Vec<(usize, [f64; 2])> = Vec::new();
    for (i, p) in sl.chunks(2).enumerate() {
        if let Some(q) = h.apply([p[0], p[1]]) {
            candidates.push((i, q));
        }
    }
    candidates.sort_by(|a, b| source_scores[a.0].total_cmp(&source_scores[b.0]).then(a.0.cmp(&b.0)));
    candidates.truncate(k);

    let d = source_desc.shape()[1];
    let sd = source_desc.value();
    let td = target_desc.value();
    let m = td.dim(0);
    let tl = target_locs.value().to_f64_vec();
    let mut source_index = Vec::with_capacity(candidates.len());
    let mut target_index = Vec::with_capacity(candidates.len());
    let mut labels = Vec::with_capacity(candidates.len());
    for &(i, warped) in &candidates {
        let a = &sd.data()[i * d..(i + 1) * d];
        let mut best = (0, f64::INFINITY);
        for j in 0..m {
            let b = &td.data()[j * d..(j + 1) * d];
            let dd: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).f64().powi(2)).sum();
            if dd < best.1 {
                best = (j, dd);
            }
        }
        let j = best.0;
        let reproj = ((warped[0] - tl[2 * j]).powi(2) + (warped[1] - tl[2 * j + 1]).powi(2)).sqrt();
        source_index.push(i);
        target_index.push(j);
        labels.push(io_label(reproj, eps));
    }
    let n = source_index.len();
    if n == 0 {
        return PairBatch { input: Var::constant(Tensor::zeros(&[5, 0])), labels, source_index, target_index };
    }
    let src = normalize_coords(&source_locs.gather_rows(&source_index), height, width);
    let tgt = normalize_coords(&target_locs.gather_rows(&target_index), height, width);
    let x = source_desc
        .gather_rows(&source_index)
        .row_distances(&target_desc.gather_rows(&target_index))
        .reshape(&[n, 1]);
    let input = Var::concat(&[src, tgt, x], 1).transpose2d();
    PairBatch { input, labels, source_index, target_index }
}

/// Mean of `½ (rᵢ − labelᵢ)²`.
pub fn io_loss<T: Scalar>(r: &Var<T>, labels: &[f64]) -> Var<T> {
    let n = labels.len();
    if n == 0 {
        return Var::constant(Tensor::scalar(T::zero()));
    }
    let target = Var::constant(Tensor::from_f64(&[n], labels));
    r.reshape(&[n]).sub(&target).square().scale(0.5).mean()
}

#[derive(Clone, Debug)]
struct Layer<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

/// The outlier classifier.
#[derive(Clone, Debug)]
pub struct IoNet<T: Scalar> {
    pub config: IoNetConfig,
    input: Conv2d<T>,
    blocks: Vec<[Layer<T>; 2]>,
    output: Conv2d<T>,
}

impl<T: Scalar> IoNet<T> {
    pub fn new(config: IoNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let input = Conv2d::new(5, c, 1, &mut rng);
        let blocks = (0..config.residual_blocks)
            .map(|_| {
                [
                    Layer { conv: Conv2d::new(c, c, 1, &mut rng), bn: BatchNorm::new(c) },
                    Layer { conv: Conv2d::new(c, c, 1, &mut rng), bn: BatchNorm::new(c) },
                ]
            })
            .collect();
        let output = Conv2d::new(c, 1, 1, &mut rng);
        Self { config, input, blocks, output }
    }

    /// `[B, 5, N]` (or `[5, N]`) pairs → `[B, N]` unbounded scores.
    pub fn forward(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>) -> Var<T> {
        self.run(x, ctx, None).0
    }

    /// Forward pass returning the instance-norm statistics of every layer.
    pub fn forward_with_stats(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>) -> (Var<T>, Vec<ChannelStats<T>>) {
        self.run(x, ctx, None)
    }

    /// Forward pass with instance-norm statistics fixed to `stats` (from a
    /// previous pass), which makes the network strictly pointwise when
    /// batch norm also runs on its running statistics.
    pub fn forward_frozen(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>, stats: &[ChannelStats<T>]) -> Var<T> {
        self.run(x, ctx, Some(stats)).0
    }

    fn run(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>, frozen: Option<&[ChannelStats<T>]>) -> (Var<T>, Vec<ChannelStats<T>>) {
        let x = if x.shape().len() == 2 { x.reshape(&[1, x.shape()[0], x.shape()[1]]) } else { x.clone() };
        let s = x.shape().to_vec();
        assert_eq!(s[1], 5, "IO-Net expects 5 input rows");
        let (b, n) = (s[0], s[2]);
        let x = x.reshape(&[b, 5, n, 1]);
        let mut stats = Vec::new();
        let mut layer_idx = 0;
        let mut apply_layer = |layer: &Layer<T>, h: &Var<T>, ctx: &mut ForwardCtx<T>| {
            let y = layer.conv.forward(h);
            let c = y.shape()[1];
            // Instance norm: each (sample, channel) over the N pairs.
            let flat = y.reshape(&[1, b * c, n]);
            let normed = match frozen {
                Some(fs) => {
                    let st = &fs[layer_idx];
                    flat.channel_normalize_fixed(&st.mean, &st.var, INSTANCE_NORM_EPS)
                }
                None => {
                    let (v, st) = flat.channel_standardize(INSTANCE_NORM_EPS);
                    stats.push(st);
                    v
                }
            };
            layer_idx += 1;
            layer.bn.forward(&normed.reshape(&[b, c, n, 1]), ctx).relu()
        };
        let x1 = self.input.forward(&x).relu();
        let mut prev2 = x1.clone();
        let mut prev = x1;
        for (i, block) in self.blocks.iter().enumerate() {
            let inp = if i == 0 { prev.clone() } else { prev.add(&prev2) };
            let h = apply_layer(&block[0], &inp, ctx);
            let out = apply_layer(&block[1], &h, ctx);
            prev2 = prev;
            prev = out;
        }
        let r = self.output.forward(&prev).reshape(&[b, n]);
        (r, stats)
    }
}

impl<T: Scalar> Module<T> for IoNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, layer) in block.iter().enumerate() {
                let p = join(prefix, &format!("block.{i}.{j}"));
                layer.conv.visit(&join(&p, "conv"), f);
                layer.bn.visit(&join(&p, "bn"), f);
            }
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (j, layer) in block.iter_mut().enumerate() {
                let p = join(prefix, &format!("block.{i}.{j}"));
                layer.conv.visit_mut(&join(&p, "conv"), f);
                layer.bn.visit_mut(&join(&p, "bn"), f);
            }
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
