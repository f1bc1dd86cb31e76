//! KeyPointNet: a VGG-style encoder with score, location and descriptor
//! heads operating on 8×8 cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::nn::{join, Conv2d, ConvBn, ForwardCtx, Module, Param};
use crate::raster::Image;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
/// Guard for normalising (near-)zero descriptor rows.
pub const DESC_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeypointNetConfig {
    /// σ₂, the cell side in pixels.
    pub cell_size: usize,
    /// σ₁, how far (in cell half-widths) a keypoint may move from its cell centre.
    pub location_ratio: f64,
    pub descriptor_dim: usize,
    /// When false, σ₁ is clamped to 1 so keypoints stay inside their cell.
    pub cross_border: bool,
    /// Sub-pixel (pixel shuffle) descriptor head at H/4 instead of H/8.
    pub descriptor_upsample: bool,
    pub dropout_rate: f64,
}

impl Default for KeypointNetConfig {
    fn default() -> Self {
        Self {
            cell_size: 8,
            location_ratio: 2.0,
            descriptor_dim: 256,
            cross_border: true,
            descriptor_upsample: true,
            dropout_rate: 0.2,
        }
    }
}

impl KeypointNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size != 8 {
            return Err(Error::config("model.cell_size", "the encoder downsamples by exactly 8"));
        }
        if !(self.location_ratio > 0.0) {
            return Err(Error::config("model.location_ratio", "must be > 0"));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::config("model.descriptor_dim", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// σ₁ after the cross-border switch.
    pub fn effective_ratio(&self) -> f64 {
        if self.cross_border {
            self.location_ratio
        } else {
            self.location_ratio.min(1.0)
        }
    }

    /// Pixel stride of the descriptor map.
    pub fn descriptor_stride(&self) -> usize {
        if self.descriptor_upsample {
            self.cell_size / 2
        } else {
            self.cell_size
        }
    }
}

/// Raw head outputs for a batch.
pub struct DenseOutputs<T: Scalar> {
    /// `[B, 1, H/8, W/8]`, sigmoid.
    pub scores: Var<T>,
    /// `[B, 2, H/8, W/8]`, tanh; channel 0 is the column offset.
    pub offsets: Var<T>,
    /// `[B, D, H/s, W/s]` with `s` the descriptor stride.
    pub descriptors: Var<T>,
}

/// One image's slice of [`DenseOutputs`].
pub struct ImageOutputs<T: Scalar> {
    /// `[N]` with `N = Hc·Wc` in row-major cell order.
    pub scores: Var<T>,
    /// `[2, Hc, Wc]`.
    pub offsets: Var<T>,
    /// `[D, Hd, Wd]`.
    pub descriptors: Var<T>,
}

impl<T: Scalar> DenseOutputs<T> {
    pub fn image(&self, b: usize) -> ImageOutputs<T> {
        let drop_batch = |v: &Var<T>| {
            let s = v.shape()[1..].to_vec();
            v.narrow(0, b, 1).reshape(&s)
        };
        let offsets = drop_batch(&self.offsets);
        let n = offsets.shape()[1] * offsets.shape()[2];
        ImageOutputs { scores: drop_batch(&self.scores).reshape(&[n]), offsets, descriptors: drop_batch(&self.descriptors) }
    }
}

#[derive(Clone, Debug)]
struct Encoder<T: Scalar> {
    convs: Vec<ConvBn<T>>,
}

#[derive(Clone, Debug)]
enum DescriptorHead<T: Scalar> {
    Upsample { c1: ConvBn<T>, c2: ConvBn<T>, c3: ConvBn<T>, out: Conv2d<T> },
    Plain { c1: ConvBn<T>, out: Conv2d<T> },
}

/// The keypoint network. Generic over the scalar type so gradient checks
/// can run in `f64`; training and inference use `f32`.
#[derive(Clone, Debug)]
pub struct KeyPointNet<T: Scalar> {
    pub config: KeypointNetConfig,
    encoder: Encoder<T>,
    score_hidden: ConvBn<T>,
    score_out: Conv2d<T>,
    loc_hidden: ConvBn<T>,
    loc_out: Conv2d<T>,
    desc: DescriptorHead<T>,
}

const ENCODER_CHANNELS: [(usize, usize); 8] =
    [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256)];

impl<T: Scalar> KeyPointNet<T> {
    pub fn new(config: KeypointNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let convs = ENCODER_CHANNELS.iter().map(|&(i, o)| ConvBn::new(i, o, 3, rng)).collect();
        let d = config.descriptor_dim;
        let score_hidden = ConvBn::new(256, 256, 3, rng);
        let score_out = Conv2d::new(256, 1, 3, rng);
        let loc_hidden = ConvBn::new(256, 256, 3, rng);
        let loc_out = Conv2d::new(256, 2, 3, rng);
        let desc = if config.descriptor_upsample {
            DescriptorHead::Upsample {
                c1: ConvBn::new(256, 256, 3, rng),
                c2: ConvBn::new(256, 512, 3, rng),
                c3: ConvBn::new(256, 256, 3, rng),
                out: Conv2d::new(256, d, 3, rng),
            }
        } else {
            DescriptorHead::Plain { c1: ConvBn::new(256, 256, 3, rng), out: Conv2d::new(256, d, 3, rng) }
        };
        Self { config, encoder: Encoder { convs }, score_hidden, score_out, loc_hidden, loc_out, desc }
    }

    /// Forward pass on `[B, 3, H, W]` input already mapped to `[−1, 1]`.
    pub fn forward(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>) -> Result<DenseOutputs<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, H, W] input, got {s:?}")));
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("input {}x{} must be divisible by 8", s[2], s[3])));
        }
        let p = self.config.dropout_rate;
        let act = |v: Var<T>| v.leaky_relu(LEAKY_SLOPE);
        let convs = &self.encoder.convs;
        let mut h = x.clone();
        let mut skip = None;
        for (i, conv) in convs.iter().enumerate() {
            h = act(conv.forward(&h, ctx));
            if i % 2 == 1 {
                h = ctx.dropout(&h, p);
                if i == 5 {
                    skip = Some(h.clone());
                }
                if i < 7 {
                    h = h.max_pool2();
                }
            }
        }
        let skip = skip.expect("encoder has a third block");

        let sh = hidden(&self.score_hidden, &h, ctx, p);
        let scores = self.score_out.forward(&sh).sigmoid();

        let lh = hidden(&self.loc_hidden, &h, ctx, p);
        let offsets = self.loc_out.forward(&lh).tanh();

        let descriptors = match &self.desc {
            DescriptorHead::Upsample { c1, c2, c3, out } => {
                let d1 = hidden(c1, &h, ctx, p);
                let d2 = act(c2.forward(&d1, ctx)).pixel_shuffle(2);
                let cat = Var::concat(&[skip, d2], 1);
                let d3 = act(c3.forward(&cat, ctx));
                out.forward(&d3)
            }
            DescriptorHead::Plain { c1, out } => {
                let d1 = hidden(c1, &h, ctx, p);
                out.forward(&d1)
            }
        };
        Ok(DenseOutputs { scores, offsets, descriptors })
    }

    /// Dense inference on one image followed by top-k selection.
    pub fn detect(&self, image: &Image, top_k: usize) -> Result<KeypointSet> {
        let x = Var::constant(image.to_network_input().cast());
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&x, &mut ctx)?;
        extract_keypoints(&out.image(0), &self.config, top_k)
    }
}

/// Conv + BN + leaky ReLU + dropout.
fn hidden<T: Scalar>(layer: &ConvBn<T>, x: &Var<T>, ctx: &mut ForwardCtx<T>, p: f64) -> Var<T> {
    let y = layer.forward(x, ctx).leaky_relu(LEAKY_SLOPE);
    ctx.dropout(&y, p)
}

/// Cell offsets `[2, Hc, Wc]` → pixel locations `[Hc·Wc, 2]` as `(u, v)`.
/// Location = cell centre + offset · σ₁(σ₂ − 1)/2.
pub fn cell_to_image<T: Scalar>(offsets: &Var<T>, config: &KeypointNetConfig) -> Var<T> {
    let s = offsets.shape();
    assert_eq!(s[0], 2, "offsets must have 2 channels");
    let (hc, wc) = (s[1], s[2]);
    let n = hc * wc;
    let cell = config.cell_size as f64;
    let half = (cell - 1.0) / 2.0;
    let mut centers = Vec::with_capacity(2 * n);
    for r in 0..hc {
        for c in 0..wc {
            centers.push(T::lit(c as f64 * cell + half));
            centers.push(T::lit(r as f64 * cell + half));
        }
    }
    let reach = config.effective_ratio() * half;
    offsets
        .reshape(&[2, n])
        .transpose2d()
        .scale(reach)
        .add(&Var::constant(Tensor::from_vec(&[n, 2], centers)))
}

/// Bilinear descriptor lookup at pixel locations `[N, 2]` on a `[D, Hd, Wd]`
/// map of the given pixel stride; rows are L2-normalised after sampling.
/// The mask flags locations that had to be clamped to the map border.
pub fn sample_descriptors<T: Scalar>(map: &Var<T>, locations: &Var<T>, stride: usize) -> (Var<T>, Vec<bool>) {
    let s = stride as f64;
    let grid = locations.scale(1.0 / s).add_scalar(-(s - 1.0) / (2.0 * s));
    let (raw, clamped) = map.sample_bilinear(&grid);
    (raw.l2_normalize_rows(DESC_NORM_EPS), clamped)
}

/// Converts dense outputs to keypoints: all cells, sorted by descending
/// score (ties by cell order), truncated to `top_k`, descriptors sampled at
/// the kept locations. No non-maximum suppression.
pub fn extract_keypoints<T: Scalar>(out: &ImageOutputs<T>, config: &KeypointNetConfig, top_k: usize) -> Result<KeypointSet> {
    let scores = out.scores.value().to_f64_vec();
    if top_k > scores.len() {
        return Err(Error::Shape(format!("top_k {top_k} exceeds {} cells", scores.len())));
    }
    let locs = cell_to_image(&out.offsets.detach(), config);
    let order = top_k_order(&scores, top_k);
    let kept = locs.gather_rows(&order);
    let dim = out.descriptors.shape()[0];
    let descriptors = if order.is_empty() {
        Vec::new()
    } else {
        let (d, _) = sample_descriptors(&out.descriptors.detach(), &kept, config.descriptor_stride());
        d.value().data().iter().map(|v| v.f64() as f32).collect()
    };
    let lv = kept.value().to_f64_vec();
    let points = lv.chunks(2).map(|p| [p[0], p[1]]).collect();
    KeypointSet::new(points, order.iter().map(|&i| scores[i]).collect(), dim, descriptors)
}

/// Indices of the `k` largest scores, ordered by (score desc, index asc).
pub fn top_k_order(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl<T: Scalar> Module<T> for KeyPointNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.encoder.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.score_hidden.visit(&join(prefix, "score.hidden"), f);
        self.score_out.visit(&join(prefix, "score.out"), f);
        self.loc_hidden.visit(&join(prefix, "location.hidden"), f);
        self.loc_out.visit(&join(prefix, "location.out"), f);
        match &self.desc {
            DescriptorHead::Upsample { c1, c2, c3, out } => {
                c1.visit(&join(prefix, "descriptor.c1"), f);
                c2.visit(&join(prefix, "descriptor.c2"), f);
                c3.visit(&join(prefix, "descriptor.c3"), f);
                out.visit(&join(prefix, "descriptor.out"), f);
            }
            DescriptorHead::Plain { c1, out } => {
                c1.visit(&join(prefix, "descriptor.c1"), f);
                out.visit(&join(prefix, "descriptor.out"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.encoder.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.score_hidden.visit_mut(&join(prefix, "score.hidden"), f);
        self.score_out.visit_mut(&join(prefix, "score.out"), f);
        self.loc_hidden.visit_mut(&join(prefix, "location.hidden"), f);
        self.loc_out.visit_mut(&join(prefix, "location.out"), f);
        match &mut self.desc {
            DescriptorHead::Upsample { c1, c2, c3, out } => {
                c1.visit_mut(&join(prefix, "descriptor.c1"), f);
                c2.visit_mut(&join(prefix, "descriptor.c2"), f);
                c3.visit_mut(&join(prefix, "descriptor.c3"), f);
                out.visit_mut(&join(prefix, "descriptor.out"), f);
            }
            DescriptorHead::Plain { c1, out } => {
                c1.visit_mut(&join(prefix, "descriptor.c1"), f);
                out.visit_mut(&join(prefix, "descriptor.out"), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_grad;

    fn small_config(upsample: bool) -> KeypointNetConfig {
        KeypointNetConfig { descriptor_dim: 16, descriptor_upsample: upsample, ..Default::default() }
    }

    #[test]
    fn output_shapes_follow_the_cell_grid() {
        for upsample in [true, false] {
            let net = KeyPointNet::<f32>::new(small_config(upsample), 0);
            let x = Var::constant(Tensor::zeros(&[2, 3, 32, 48]));
            let out = net.forward(&x, &mut ForwardCtx::eval()).unwrap();
            assert_eq!(out.scores.shape(), &[2, 1, 4, 6]);
            assert_eq!(out.offsets.shape(), &[2, 2, 4, 6]);
            let expect: &[usize] = if upsample { &[2, 16, 8, 12] } else { &[2, 16, 4, 6] };
            assert_eq!(out.descriptors.shape(), expect);
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = KeypointNetConfig { descriptor_dim: 4, dropout_rate: 0.0, ..Default::default() };
        let mut net = KeyPointNet::<f64>::new(cfg, 3);
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..2 * 3 * 256).map(|i| ((i as f64) * 0.37).sin()).collect());
        let weights = |shape: &[usize], k: f64| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * k).cos()).collect())
        };
        let loss = |net: &KeyPointNet<f64>| {
            let out = net.forward(&Var::constant(x.clone()), &mut ForwardCtx::train(0)).unwrap();
            let s = out.scores.mul_const(weights(out.scores.shape(), 0.7)).sum();
            let o = out.offsets.mul_const(weights(out.offsets.shape(), 1.3)).sum();
            let d = out.descriptors.mul_const(weights(out.descriptors.shape(), 0.9)).sum();
            s.add(&o).add(&d)
        };
        let grads = loss(&net).backward();
        let mut probes = Vec::new();
        net.visit("", &mut |name, p| {
            if p.trainable {
                let g = grads.get_id(p.id).map(|g| g.data()[1 % p.value.numel()]).unwrap_or(0.0);
                probes.push((name.to_string(), g));
            }
        });
        let h = 1e-5;
        for (name, analytic) in probes {
            let shift = |net: &mut KeyPointNet<f64>, delta: f64| {
                net.visit_mut("", &mut |n, p| {
                    if n == name {
                        let i = 1 % p.value.numel();
                        p.value.data_mut()[i] += delta;
                    }
                })
            };
            shift(&mut net, h);
            let up = loss(&net).item();
            shift(&mut net, -2.0 * h);
            let down = loss(&net).item();
            shift(&mut net, h);
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(err < 1e-4, "{name}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = KeyPointNet::<f32>::new(small_config(true), 0);
        let x = Var::constant(Tensor::zeros(&[1, 3, 30, 40]));
        assert!(matches!(net.forward(&x, &mut ForwardCtx::eval()), Err(Error::Shape(_))));
    }

    #[test]
    fn cell_to_image_examples() {
        let cfg = KeypointNetConfig::default();
        // 1×2 cells: zero offset in cell 0, u′ = 1 in cell 1.
        let off = Var::constant(Tensor::<f64>::from_vec(&[2, 1, 2], vec![0.0, 1.0, 0.0, 0.0]));
        let p = cell_to_image(&off, &cfg);
        assert_eq!(p.value().data(), &[3.5, 3.5, 8.0 + 3.5 + 7.0, 3.5]);
        let off = Var::constant(Tensor::<f64>::from_vec(&[2, 1, 1], vec![1.0, 0.0]));
        assert_eq!(cell_to_image(&off, &cfg).value().data()[0], 10.5);
        let inside = KeypointNetConfig { cross_border: false, ..cfg };
        assert_eq!(cell_to_image(&off, &inside).value().data()[0], 7.0);
    }

    #[test]
    fn cell_to_image_gradient_is_constant_reach() {
        let cfg = KeypointNetConfig::default();
        let leaf = Var::leaf(Tensor::<f64>::from_vec(&[2, 2, 2], vec![0.1, -0.3, 0.5, 0.9, -0.2, 0.0, 0.4, -0.7]));
        let g = cell_to_image(&leaf, &cfg).sum().backward();
        assert!(g.get(&leaf).unwrap().data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn descriptor_sampling_examples() {
        // Two nodes on one row of a stride-8 map.
        let map = Var::constant(Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let at_node = Var::constant(Tensor::from_vec(&[1, 2], vec![3.5, 3.5]));
        assert_eq!(sample_descriptors(&map, &at_node, 8).0.value().data(), &[1.0, 0.0]);
        let mid = Var::constant(Tensor::from_vec(&[1, 2], vec![7.5, 3.5]));
        let d = sample_descriptors(&map, &mid, 8).0;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(d.value().max_abs_diff(&Tensor::from_vec(&[1, 2], vec![h, h])) < 1e-12);
        let constant = Var::constant(Tensor::<f64>::from_vec(&[2, 2, 2], vec![3.0; 8]));
        let pts = Var::constant(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 13.2, 9.1]));
        let d = sample_descriptors(&constant, &pts, 8).0;
        assert!(d.value().data().iter().all(|&v| (v - h).abs() < 1e-12));
    }

    #[test]
    fn descriptor_sampling_gradient() {
        let map = Tensor::<f64>::from_vec(&[3, 2, 3], (0..18).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect());
        let pts = Tensor::from_vec(&[2, 2], vec![5.1, 4.3, 12.7, 9.9]);
        let mv = Var::constant(map.clone());
        check_grad(&pts, |p| sample_descriptors(&mv, p, 8).0.narrow(1, 0, 2).sum(), 1e-5);
        let pv = Var::constant(pts.clone());
        check_grad(&map, |m| sample_descriptors(m, &pv, 8).0.narrow(1, 1, 1).sum(), 1e-5);
    }

    #[test]
    fn top_k_is_stable_and_ordered() {
        let s = [0.5, 0.9, 0.5, 0.1, 0.9];
        assert_eq!(top_k_order(&s, 3), vec![1, 4, 0]);
        assert_eq!(top_k_order(&s, 5), vec![1, 4, 0, 2, 3]);
    }

    #[test]
    fn detection_respects_top_k_and_is_deterministic() {
        let net = KeyPointNet::<f32>::new(small_config(true), 3);
        let img = Image::from_fn(3, 32, 48, |c, y, x| ((c + y * 3 + x * 5) % 17) as f32 / 16.0);
        let all = net.detect(&img, 24).unwrap();
        assert_eq!(all.len(), 24);
        let some = net.detect(&img, 5).unwrap();
        assert_eq!(some, net.detect(&img, 5).unwrap());
        let min_kept = some.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut rest: Vec<f64> = all.scores.clone();
        rest.sort_by(|a, b| b.total_cmp(a));
        assert!(rest[5..].iter().all(|&s| s <= min_kept));
        for i in 0..some.len() {
            let n: f32 = some.descriptor(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-4);
        }
        assert!(net.detect(&img, 0).unwrap().is_empty());
    }
}
