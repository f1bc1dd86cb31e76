//! Self-supervised training: warped pair generation, the combined loss on
//! both frames, and the joint optimisation of KeyPointNet and IO-Net.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalPair;
use crate::geometry::{
    apply_photometric, in_bounds_mask, sample_homography, warp_image, warp_points, warp_points_var, Homography,
    HomographyConfig, PhotometricConfig,
};
use crate::ionet::{build_pairs, io_loss, IoNet};
use crate::losses::{associate, loc_loss, score_loss, triplet_loss, LossConfig, LossTerms};
use crate::model::{cell_to_image, sample_descriptors, ImageOutputs, KeyPointNet, KeypointNetConfig};
use crate::nn::{Adam, ForwardCtx, Module};
use crate::raster::Image;
use crate::seed;
use crate::tensor::Tensor;

const STREAM_MODEL_INIT: u64 = 1;
const STREAM_IONET_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_PAIR: u64 = 4;
const STREAM_DROPOUT: u64 = 5;
const STREAM_CALIBRATION: u64 = 6;

/// Component gating of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Cells confined to their own area, plain descriptor head, no IO-Net.
    V0,
    /// V0 with cross-border keypoint offsets.
    V1,
    /// V1 with the upsampled descriptor head.
    V2,
    /// V2 trained with the IO-Net loss instead of the descriptor loss.
    V3,
    /// Everything enabled.
    #[default]
    V4,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [Self::V0, Self::V1, Self::V2, Self::V3, Self::V4];

    pub fn cross_border(self) -> bool {
        self != Self::V0
    }

    pub fn descriptor_upsample(self) -> bool {
        matches!(self, Self::V2 | Self::V3 | Self::V4)
    }

    pub fn uses_io(self) -> bool {
        matches!(self, Self::V3 | Self::V4)
    }

    pub fn uses_descriptor_loss(self) -> bool {
        self != Self::V3
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("train.ablation_variant", format!("unknown variant `{s}` (expected V0..V4)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs trained at the base rate before it is halved once.
    pub lr_halve_epoch: usize,
    /// Working resolution `[height, width]`.
    pub image_size: [usize; 2],
    pub ablation_variant: AblationVariant,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            lr_halve_epoch: 40,
            image_size: [240, 320],
            ablation_variant: AblationVariant::V4,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.lr_halve_epoch >= self.epochs {
            return Err(Error::config("train.lr_halve_epoch", "must be < train.epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        let [h, w] = self.image_size;
        if h % 8 != 0 || w % 8 != 0 || h <= 16 || w <= 16 {
            return Err(Error::config("train.image_size", format!("{h}x{w} must exceed 16 and be divisible by 8")));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_halve_epoch {
            self.learning_rate
        } else {
            self.learning_rate * 0.5
        }
    }
}

/// A source frame, its warped and independently jittered target, and the
/// homography mapping source pixels to target pixels.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub source: Image,
    pub target: Image,
    pub homography: Homography,
    /// Seeds of the homography, source jitter and target jitter draws.
    pub seeds: [u64; 3],
}

/// Builds a training pair at `size = (height, width)`. Images of another
/// size are resized to cover the frame and centre-cropped first.
pub fn make_pair(
    image: &Image,
    geometry: &HomographyConfig,
    photometric: &PhotometricConfig,
    size: (usize, usize),
    pair_seed: u64,
) -> Result<TrainingPair> {
    let (h, w) = size;
    let base = if (image.height, image.width) == size { image.clone() } else { image.resize_cover(h, w) };
    let seeds = [seed::derive(pair_seed, &[0]), seed::derive(pair_seed, &[1]), seed::derive(pair_seed, &[2])];
    let homography = sample_homography(geometry, h, w, seeds[0])?;
    let (warped, _) = warp_image(&base, &homography, h, w);
    let source = apply_photometric(&base, photometric, seeds[1]);
    let target = apply_photometric(&warped, photometric, seeds[2]);
    Ok(TrainingPair { source, target, homography, seeds })
}

/// Differentiable loss terms of one pair.
pub struct PairLoss {
    pub loc: Var<f32>,
    pub desc: Option<Var<f32>>,
    pub score: Var<f32>,
    pub io: Option<Var<f32>>,
    pub associations: usize,
}

/// Static settings of the per-pair loss.
pub struct LossSetup<'a> {
    pub model: &'a KeypointNetConfig,
    pub loss: &'a LossConfig,
    pub image_size: (usize, usize),
    pub descriptor_loss: bool,
    /// IO-Net and the number of mined pairs, when enabled.
    pub ionet: Option<(&'a IoNet<f32>, usize)>,
}

fn as_points(v: &Var<f32>) -> Vec<[f64; 2]> {
    v.value().to_f64_vec().chunks(2).map(|p| [p[0], p[1]]).collect()
}

/// Loss terms for one source/target output pair, or `None` when no source
/// keypoint associates with a target keypoint.
pub fn pair_loss(
    src: &ImageOutputs<f32>,
    tgt: &ImageOutputs<f32>,
    h: &Homography,
    setup: &LossSetup,
    ctx: &mut ForwardCtx<f32>,
) -> Option<PairLoss> {
    let (height, width) = setup.image_size;
    let stride = setup.model.descriptor_stride();
    let src_locs = cell_to_image(&src.offsets, setup.model);
    let tgt_locs = cell_to_image(&tgt.offsets, setup.model);
    let (warped, finite) = warp_points_var(&src_locs, h);
    let warped_pts = as_points(&warped);
    let visible: Vec<bool> =
        in_bounds_mask(&warped_pts, height, width).iter().zip(&finite).map(|(&a, &b)| a && b).collect();
    let tgt_pts = as_points(&tgt_locs);
    let assoc = associate(&warped_pts, &visible, &tgt_pts, setup.loss.epsilon_uv);
    if assoc.is_empty() {
        return None;
    }
    let loc = loc_loss(&warped, &tgt_locs, &assoc);
    let score = score_loss(&src.scores, &tgt.scores, &warped, &tgt_locs, &assoc);

    let desc = setup.descriptor_loss.then(|| {
        let idx: Vec<usize> = (0..visible.len()).filter(|&i| visible[i]).collect();
        let (anchors, _) = sample_descriptors(&src.descriptors, &src_locs.detach().gather_rows(&idx), stride);
        let (positives, _) = sample_descriptors(&tgt.descriptors, &warped.detach().gather_rows(&idx), stride);
        let pos_locs: Vec<[f64; 2]> = idx.iter().map(|&i| warped_pts[i]).collect();
        triplet_loss(&anchors, &positives, &pos_locs, &positives, &pos_locs, setup.loss.margin, setup.loss.relaxation)
    });

    let io = setup.ionet.map(|(net, k)| {
        let (src_desc, _) = sample_descriptors(&src.descriptors, &src_locs, stride);
        let (tgt_desc, _) = sample_descriptors(&tgt.descriptors, &tgt_locs, stride);
        let scores = src.scores.value().to_f64_vec();
        let pairs = build_pairs(&src_locs, &scores, &src_desc, &tgt_locs, &tgt_desc, h, setup.image_size, k, setup.loss.epsilon_uv);
        if pairs.is_empty() {
            return Var::constant(Tensor::scalar(0.0));
        }
        let r = net.forward(&pairs.input, ctx);
        io_loss(&r, &pairs.labels)
    });
    Some(PairLoss { loc, desc, score, io, associations: assoc.len() })
}

/// Gradient L2 norms grouped by network part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub encoder: f64,
    pub score: f64,
    pub location: f64,
    pub descriptor: f64,
    pub ionet: f64,
}

impl GradNorms {
    fn collect(model: &KeyPointNet<f32>, ionet: Option<&IoNet<f32>>, grads: &Gradients<f32>) -> Self {
        let mut sq = [0.0f64; 5];
        let mut add = |slot: usize, id: usize| {
            if let Some(g) = grads.get_id(id) {
                sq[slot] += g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            }
        };
        model.visit("", &mut |name, p| {
            let slot = match name.split('.').next() {
                Some("encoder") => 0,
                Some("score") => 1,
                Some("location") => 2,
                _ => 3,
            };
            add(slot, p.id);
        });
        if let Some(net) = ionet {
            net.visit("", &mut |_, p| add(4, p.id));
        }
        let [encoder, score, location, descriptor, ionet] = sq.map(f64::sqrt);
        Self { encoder, score, location, descriptor, ionet }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// One-based optimiser step (skipped steps keep the previous count).
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossTerms,
    pub pairs_used: usize,
    pub associations: usize,
    pub skipped: bool,
    pub grad_norms: GradNorms,
    pub elapsed_ms: f64,
}

/// Networks and optimiser state of a training run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: KeyPointNet<f32>,
    pub ionet: Option<IoNet<f32>>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps skipped because no pair associated.
    pub skipped_steps: u64,
}

/// Where training images come from.
pub enum Corpus {
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "ppm", "pgm", "bmp", "tif", "tiff"];

impl Corpus {
    /// Recursively lists readable raster files in name order. Files whose
    /// header cannot be decoded are skipped with a warning.
    pub fn scan(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("corpus {} is not a directory", root.display())));
        }
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Dataset(e.to_string()))?;
            let path = entry.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !entry.file_type().is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            match image::image_dimensions(path) {
                Ok(_) => files.push(path.to_path_buf()),
                Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
            }
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!("no readable images under {}", root.display())));
        }
        Ok(Corpus::Files(files))
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Files(f) => f.len(),
            Corpus::Memory(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Image> {
        match self {
            Corpus::Files(f) => Image::load(&f[i]),
            Corpus::Memory(m) => Ok(m[i].clone()),
        }
    }
}

/// Summary of a [`Trainer::fit`] call.
#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub steps: u64,
    pub skipped_steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl Trainer {
    /// Fresh networks initialised from the training seed. The model config
    /// must already reflect the ablation variant.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = KeyPointNet::new(config.model.clone(), seed::derive(seed, &[STREAM_MODEL_INIT]));
        let ionet = config
            .train
            .ablation_variant
            .uses_io()
            .then(|| IoNet::new(config.ionet.clone(), seed::derive(seed, &[STREAM_IONET_INIT])));
        Ok(Self { config, model, ionet, adam: Adam::default(), epoch: 0, skipped_steps: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: RunConfig, checkpoint: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = checkpoint.model(Some(&config.model))?;
        let ionet = if config.train.ablation_variant.uses_io() {
            Some(checkpoint.ionet()?.ok_or_else(|| Error::Checkpoint("checkpoint lacks IO-Net weights".into()))?)
        } else {
            None
        };
        let adam = checkpoint.adam().ok_or_else(|| Error::Checkpoint("checkpoint lacks optimiser state".into()))?;
        Ok(Self { config, model, ionet, adam, epoch: checkpoint.header.epoch, skipped_steps: 0 })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let snapshot = serde_json::to_value(&self.config).ok();
        Checkpoint::capture(&self.model, self.ionet.as_ref(), Some(&self.adam), self.epoch, snapshot)
    }

    fn size(&self) -> (usize, usize) {
        let [h, w] = self.config.train.image_size;
        (h, w)
    }

    /// Seed of the pair built from corpus item `index` in `epoch`.
    pub fn pair_seed(&self, epoch: usize, index: usize) -> u64 {
        seed::derive(self.config.train.seed, &[STREAM_PAIR, epoch as u64, index as u64])
    }

    /// Shuffled corpus order of an epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(self.config.train.seed, &[STREAM_SHUFFLE, epoch as u64])));
        order
    }

    /// One joint optimiser step on a batch of pairs.
    pub fn train_step(&mut self, pairs: &[TrainingPair], lr: f64) -> Result<StepReport> {
        let start = Instant::now();
        let b = pairs.len();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let (h, w) = self.size();
        let x = batch_input(pairs, (h, w))?;
        let mut ctx = ForwardCtx::train(seed::derive(self.config.train.seed, &[STREAM_DROPOUT, self.adam.step]));
        let out = self.model.forward(&x, &mut ctx)?;
        let variant = self.config.train.ablation_variant;
        let setup = LossSetup {
            model: &self.model.config,
            loss: &self.config.loss,
            image_size: (h, w),
            descriptor_loss: variant.uses_descriptor_loss(),
            ionet: self.ionet.as_ref().map(|n| (n, self.config.ionet.k)),
        };
        let losses: Vec<PairLoss> =
            (0..b).filter_map(|i| pair_loss(&out.image(i), &out.image(b + i), &pairs[i].homography, &setup, &mut ctx)).collect();
        let epoch = self.epoch;
        if losses.is_empty() {
            self.skipped_steps += 1;
            log::warn!("step skipped: no associations in any pair (total skipped {})", self.skipped_steps);
            return Ok(StepReport {
                step: self.adam.step,
                epoch,
                lr,
                losses: LossTerms::default(),
                pairs_used: 0,
                associations: 0,
                skipped: true,
                grad_norms: GradNorms::default(),
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let n = losses.len() as f64;
        let mean = |vars: Vec<Var<f32>>| -> Option<Var<f32>> {
            let mut it = vars.into_iter();
            let first = it.next()?;
            Some(it.fold(first, |acc, v| acc.add(&v)).scale(1.0 / n))
        };
        let loc = mean(losses.iter().map(|l| l.loc.clone()).collect()).expect("nonempty");
        let score = mean(losses.iter().map(|l| l.score.clone()).collect()).expect("nonempty");
        let desc = mean(losses.iter().filter_map(|l| l.desc.clone()).collect());
        let io = mean(losses.iter().filter_map(|l| l.io.clone()).collect());
        let total = crate::losses::total_loss(&loc, desc.as_ref(), &score, io.as_ref(), &self.config.loss);
        let terms = LossTerms {
            loc: loc.value().item().into(),
            desc: desc.as_ref().map_or(0.0, |d| d.value().item().into()),
            score: score.value().item().into(),
            io: io.as_ref().map_or(0.0, |v| v.value().item().into()),
            total: total.value().item().into(),
        };
        if !terms.total.is_finite() {
            return Err(Error::Shape(format!("non-finite loss at step {}", self.adam.step + 1)));
        }
        let grads = total.backward();
        let grad_norms = GradNorms::collect(&self.model, self.ionet.as_ref(), &grads);
        {
            let mut modules: Vec<(&str, &mut dyn Module<f32>)> = vec![("model", &mut self.model)];
            if let Some(io) = self.ionet.as_mut() {
                modules.push(("ionet", io));
            }
            self.adam.update(&mut modules, &grads, lr);
        }
        self.model.commit(&mut ctx);
        if let Some(io) = self.ionet.as_mut() {
            io.commit(&mut ctx);
        }
        Ok(StepReport {
            step: self.adam.step,
            epoch,
            lr,
            losses: terms,
            pairs_used: losses.len(),
            associations: losses.iter().map(|l| l.associations).sum(),
            skipped: false,
            grad_norms,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Copy of the detector whose batch-norm running statistics are
    /// re-estimated from one pass over freshly warped corpus pairs. The
    /// weights are untouched.
    pub fn calibrated_model(&self, corpus: &Corpus) -> Result<KeyPointNet<f32>> {
        let mut model = self.model.clone();
        let size = self.size();
        let indices: Vec<usize> = (0..corpus.len()).collect();
        for (c, chunk) in indices.chunks(self.config.train.batch_size).enumerate() {
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let img = corpus.get(i)?;
                    let s = seed::derive(self.config.train.seed, &[STREAM_CALIBRATION, i as u64]);
                    make_pair(&img, &self.config.homography, &self.config.photometric, size, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = batch_input(&pairs, size)?;
            let mut ctx = ForwardCtx::train(seed::derive(self.config.train.seed, &[STREAM_CALIBRATION, c as u64, 1]));
            model.forward(&x, &mut ctx)?;
            model.commit(&mut ctx);
        }
        Ok(model)
    }

    /// Builds the pairs of one batch in parallel; unreadable images are
    /// dropped with a warning.
    fn batch_pairs(&self, corpus: &Corpus, epoch: usize, indices: &[usize]) -> Result<Vec<TrainingPair>> {
        let size = self.size();
        let results: Vec<Result<Option<TrainingPair>>> = indices
            .par_iter()
            .map(|&i| {
                let img = match corpus.get(i) {
                    Ok(img) => img,
                    Err(e) => {
                        log::warn!("skipping corpus item {i}: {e}");
                        return Ok(None);
                    }
                };
                make_pair(&img, &self.config.homography, &self.config.photometric, size, self.pair_seed(epoch, i)).map(Some)
            })
            .collect();
        results.into_iter().filter_map(|r| r.transpose()).collect()
    }

    /// Trains the remaining epochs. With an output directory, appends every
    /// step to `train_log.jsonl` and writes `epoch_XXXX.ckpt` plus
    /// `latest.ckpt` at the configured cadence.
    pub fn fit(
        &mut self,
        corpus: &Corpus,
        output: Option<&Path>,
        mut on_step: impl FnMut(&StepReport, &Trainer),
    ) -> Result<FitSummary> {
        if corpus.is_empty() {
            return Err(Error::Dataset("empty corpus".into()));
        }
        let mut log_file = match output {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let mut summary = FitSummary::default();
        let tc = self.config.train.clone();
        while self.epoch < tc.epochs {
            let epoch = self.epoch;
            let lr = tc.learning_rate_at(epoch);
            let order = self.epoch_order(epoch, corpus.len());
            for chunk in order.chunks(tc.batch_size) {
                let pairs = self.batch_pairs(corpus, epoch, chunk)?;
                if pairs.is_empty() {
                    continue;
                }
                let report = self.train_step(&pairs, lr)?;
                if report.skipped {
                    summary.skipped_steps += 1;
                } else {
                    summary.steps += 1;
                }
                if let Some((path, f)) = log_file.as_mut() {
                    let line = serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?;
                    writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                on_step(&report, self);
            }
            self.epoch += 1;
            log::info!("epoch {} done, step {}", self.epoch, self.adam.step);
            if let Some(dir) = output {
                if let Some((path, f)) = log_file.as_mut() {
                    f.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                if self.epoch % tc.checkpoint_every == 0 || self.epoch == tc.epochs {
                    let ckpt = self.checkpoint();
                    let path = dir.join(format!("epoch_{:04}.ckpt", self.epoch));
                    ckpt.save(&path)?;
                    ckpt.save(&dir.join("latest.ckpt"))?;
                    summary.checkpoints.push(path);
                }
            }
        }
        Ok(summary)
    }
}

/// Sources then targets of a batch as one network input in [-1, 1].
fn batch_input(pairs: &[TrainingPair], (h, w): (usize, usize)) -> Result<Var<f32>> {
    let mut data = Vec::with_capacity(2 * pairs.len() * 3 * h * w);
    for img in pairs.iter().map(|p| &p.source).chain(pairs.iter().map(|p| &p.target)) {
        if (img.height, img.width) != (h, w) || img.channels != 3 {
            return Err(Error::Shape(format!("pair image {}x{}x{} != 3x{h}x{w}", img.channels, img.height, img.width)));
        }
        data.extend(img.data.iter().map(|&v| v * 2.0 - 1.0));
    }
    Ok(Var::constant(Tensor::from_vec(&[2 * pairs.len(), 3, h, w], data)))
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Held-out evaluation pairs built with the training augmentations.
pub fn holdout_pairs(
    images: &[Image],
    geometry: &HomographyConfig,
    photometric: &PhotometricConfig,
    size: (usize, usize),
    seed_base: u64,
) -> Result<Vec<EvalPair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = make_pair(img, geometry, photometric, size, seed::derive(seed_base, &[i as u64]))?;
            Ok(EvalPair {
                sequence: format!("holdout_{i:03}"),
                subset: None,
                index: i,
                source: p.source,
                target: p.target,
                homography: p.homography,
            })
        })
        .collect()
}

/// Mean L2 distance between the descriptor of each detected source
/// keypoint and the target descriptor at its ground-truth warped location,
/// over keypoints that stay inside the target.
pub fn matched_descriptor_distance(model: &KeyPointNet<f32>, pairs: &[EvalPair], top_k: usize) -> Result<f64> {
    let stride = model.config.descriptor_stride();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs {
        let kp = model.detect(&p.source, top_k)?;
        let x = Var::constant(p.target.to_network_input());
        let out = model.forward(&x, &mut ForwardCtx::eval())?.image(0);
        let (warped, finite) = warp_points(&kp.points, &p.homography);
        let inside = in_bounds_mask(&warped, p.target.height, p.target.width);
        let keep: Vec<usize> = (0..kp.len()).filter(|&i| finite[i] && inside[i]).collect();
        if keep.is_empty() {
            continue;
        }
        let locs: Vec<f32> = keep.iter().flat_map(|&i| [warped[i][0] as f32, warped[i][1] as f32]).collect();
        let (td, _) = sample_descriptors(&out.descriptors, &Var::constant(Tensor::from_vec(&[keep.len(), 2], locs)), stride);
        let td = td.value();
        for (row, &i) in keep.iter().enumerate() {
            let a = kp.descriptor(i);
            let b = &td.data()[row * kp.dim..(row + 1) * kp.dim];
            total += a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Dataset("no ground-truth matched keypoints".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        Image::from_fn(3, h, w, |c, y, x| {
            let v = ((x as f64 * 0.37 + seed as f64).sin() * (y as f64 * 0.23 + c as f64).cos() * 0.5 + 0.5) as f32;
            if (x / 7 + y / 5) % 3 == 0 { 1.0 - v } else { v }
        })
    }

    fn tiny_config(variant: AblationVariant) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.image_size = [32, 48];
        cfg.train.batch_size = 2;
        cfg.train.epochs = 2;
        cfg.train.lr_halve_epoch = 1;
        cfg.model.descriptor_dim = 16;
        cfg.ionet.channels = 8;
        cfg.ionet.k = 8;
        cfg.train.ablation_variant = variant;
        cfg.apply_variant();
        cfg
    }

    #[test]
    fn variant_gating_table() {
        use AblationVariant::*;
        let row = |v: AblationVariant| (v.cross_border(), v.descriptor_upsample(), v.uses_io(), v.uses_descriptor_loss());
        assert_eq!(row(V0), (false, false, false, true));
        assert_eq!(row(V1), (true, false, false, true));
        assert_eq!(row(V2), (true, true, false, true));
        assert_eq!(row(V3), (true, true, true, false));
        assert_eq!(row(V4), (true, true, true, true));
        assert_eq!("v3".parse::<AblationVariant>().unwrap(), V3);
    }

    #[test]
    fn learning_rate_halves_after_configured_epoch() {
        let tc = TrainConfig::default();
        assert_eq!(tc.learning_rate_at(39), 1e-3);
        assert_eq!(tc.learning_rate_at(40), 5e-4);
    }

    #[test]
    fn zero_augmentation_pair_is_identity() {
        let img = textured(40, 56, 1);
        let p = make_pair(&img, &HomographyConfig::identity(), &PhotometricConfig::identity(), (32, 48), 9).unwrap();
        assert_eq!(p.homography, Homography::identity());
        assert_eq!(p.source.data, p.target.data);
    }

    #[test]
    fn pairs_are_deterministic_per_seed() {
        let img = textured(32, 48, 2);
        let geo = HomographyConfig::default();
        let photo = PhotometricConfig::default();
        let a = make_pair(&img, &geo, &photo, (32, 48), 4).unwrap();
        let b = make_pair(&img, &geo, &photo, (32, 48), 4).unwrap();
        assert_eq!(a.target.data, b.target.data);
        assert_eq!(a.homography, b.homography);
        let c = make_pair(&img, &geo, &photo, (32, 48), 5).unwrap();
        assert_ne!(a.homography, c.homography);
    }

    #[test]
    fn identity_pair_has_zero_location_loss() {
        let mut cfg = tiny_config(AblationVariant::V4);
        cfg.model.dropout_rate = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let img = textured(32, 48, 3);
        let p = make_pair(&img, &HomographyConfig::identity(), &PhotometricConfig::identity(), (32, 48), 0).unwrap();
        let r = t.train_step(&[p], 1e-3).unwrap();
        assert!(r.losses.loc.abs() < 1e-5, "{}", r.losses.loc);
        assert!(r.losses.score.abs() < 1e-5, "{}", r.losses.score);
    }

    #[test]
    fn v3_reports_no_descriptor_loss_but_descriptor_gradients() {
        let mut t = Trainer::new(tiny_config(AblationVariant::V3)).unwrap();
        let img = textured(32, 48, 4);
        let p = make_pair(&img, &HomographyConfig::default(), &PhotometricConfig::default(), (32, 48), 1).unwrap();
        let r = t.train_step(&[p], 1e-3).unwrap();
        assert_eq!(r.losses.desc, 0.0);
        assert!(r.grad_norms.descriptor > 0.0);
        assert!(r.grad_norms.ionet > 0.0);
    }

    #[test]
    fn calibration_moves_only_running_statistics() {
        let t = Trainer::new(tiny_config(AblationVariant::V4)).unwrap();
        let corpus = Corpus::Memory((0..3).map(|i| textured(32, 48, 10 + i)).collect());
        let c = t.calibrated_model(&corpus).unwrap();
        let (before, after) = (t.model.named_tensors(), c.named_tensors());
        let mut moved = 0;
        for ((name, a, trainable), (_, b, _)) in before.iter().zip(&after) {
            if *trainable {
                assert_eq!(a.data(), b.data(), "{name}");
            } else if a.data() != b.data() {
                moved += 1;
            }
        }
        assert!(moved > 0);
        assert_eq!(t.calibrated_model(&corpus).unwrap().named_tensors()[0].1.data(), after[0].1.data());
    }

    #[test]
    fn all_heads_receive_gradients() {
        let mut t = Trainer::new(tiny_config(AblationVariant::V4)).unwrap();
        let img = textured(32, 48, 5);
        let p = make_pair(&img, &HomographyConfig::default(), &PhotometricConfig::default(), (32, 48), 2).unwrap();
        let g = t.train_step(&[p], 1e-3).unwrap().grad_norms;
        assert!(g.encoder > 0.0 && g.score > 0.0 && g.location > 0.0 && g.descriptor > 0.0);
    }

    #[test]
    fn first_step_is_deterministic() {
        let img = textured(32, 48, 6);
        let corpus = Corpus::Memory(vec![img.clone(), textured(32, 48, 7)]);
        let run = || {
            let mut cfg = tiny_config(AblationVariant::V4);
            cfg.train.epochs = 1;
            cfg.train.lr_halve_epoch = 0;
            let mut t = Trainer::new(cfg).unwrap();
            let mut first = None;
            t.fit(&corpus, None, |r, _| {
                first.get_or_insert(r.losses);
            })
            .unwrap();
            first.unwrap()
        };
        assert_eq!(run(), run());
    }
}
