//! Layers, parameter bookkeeping and the Adam optimiser.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{fresh_id, Gradients, Var};
use crate::tensor::{Scalar, Tensor};

/// A named tensor owned by a layer. Trainable parameters get gradients;
/// buffers (batch-norm running statistics) are only persisted.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub id: usize,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { id: fresh_id(), value, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self { id: fresh_id(), value, trainable: false }
    }

    /// Graph leaf carrying this parameter's id.
    pub fn var(&self) -> Var<T> {
        if self.trainable {
            Var::parameter(self.id, self.value.clone())
        } else {
            Var::constant(self.value.clone())
        }
    }
}

/// Anything holding named parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.numel();
            }
        });
        n
    }

    /// Writes pending buffer updates recorded during a training forward.
    fn commit(&mut self, ctx: &mut ForwardCtx<T>) {
        if ctx.updates.is_empty() {
            return;
        }
        let updates = &ctx.updates;
        self.visit_mut("", &mut |_, p| {
            if let Some(v) = updates.get(&p.id) {
                p.value = v.clone();
            }
        });
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<T>, bool)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone(), p.trainable)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-forward state: train/eval mode, the dropout stream and batch-norm
/// running-statistic updates waiting to be committed.
pub struct ForwardCtx<T: Scalar> {
    pub train: bool,
    rng: ChaCha8Rng,
    updates: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn eval() -> Self {
        Self { train: false, rng: ChaCha8Rng::seed_from_u64(0), updates: HashMap::new() }
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, rng: ChaCha8Rng::seed_from_u64(seed), updates: HashMap::new() }
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, x: &Var<T>, p: f64) -> Var<T> {
        if !self.train || p <= 0.0 {
            return x.clone();
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.value().numel())
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        x.mul_const(Tensor::from_vec(x.shape(), mask))
    }
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect())
}

/// Same-padded square convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled uniform initialisation, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Param::new(uniform(&[cout, cin, k, k], bound, rng)),
            bias: Param::new(uniform(&[cout], bound, rng)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.conv2d(&self.weight.var(), &self.bias.var())
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalisation over every axis except the channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::ones(&[channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>) -> Var<T> {
        let normed = if ctx.train {
            let (y, stats) = x.channel_standardize(self.eps);
            let m = T::lit(self.momentum);
            let unbias = if stats.count > 1 {
                T::lit(stats.count as f64 / (stats.count - 1) as f64)
            } else {
                T::one()
            };
            let mean = self.running_mean.value.zip_map(
                &Tensor::from_vec(&[stats.mean.len()], stats.mean),
                |r, b| (T::one() - m) * r + m * b,
            );
            let var = self.running_var.value.zip_map(
                &Tensor::from_vec(&[stats.var.len()], stats.var),
                |r, b| (T::one() - m) * r + m * b * unbias,
            );
            ctx.updates.insert(self.running_mean.id, mean);
            ctx.updates.insert(self.running_var.id, var);
            y
        } else {
            x.channel_normalize_fixed(self.running_mean.value.data(), self.running_var.value.data(), self.eps)
        };
        normed.channel_affine(&self.gamma.var(), &self.beta.var())
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Convolution followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, rng), bn: BatchNorm::new(cout) }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &mut ForwardCtx<T>) -> Var<T> {
        self.bn.forward(&self.conv.forward(x), ctx)
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// so they survive checkpoint round trips.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }
}

impl Adam {
    /// One optimiser step over every trainable parameter of the given
    /// `(prefix, module)` list that received a gradient. Parameters without
    /// a gradient are left untouched.
    pub fn update(&mut self, modules: &mut [(&str, &mut dyn Module<f32>)], grads: &Gradients<f32>, lr: f64) {
        self.step += 1;
        for (prefix, module) in modules.iter_mut() {
            self.apply(&mut **module, prefix, grads, lr);
        }
    }

    fn apply(&mut self, module: &mut dyn Module<f32>, prefix: &str, grads: &Gradients<f32>, lr: f64) {
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = eps * bc2.sqrt() as f32;
        let moments = &mut self.moments;
        module.visit_mut(prefix, &mut |name, p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.get_id(p.id) else { return };
            let n = p.value.numel();
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() + eps_hat);
            }
        });
    }
}
