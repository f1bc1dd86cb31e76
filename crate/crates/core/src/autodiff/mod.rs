//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Var`] is an immutable node of a dynamically built graph. Operations
//! record a backward closure; [`Var::backward`] walks the graph in reverse
//! topological order and returns gradients for every leaf that requires
//! them. Parameters are leaves carrying a stable id so their gradients can
//! be looked up after the pass and repeated uses accumulate.

mod conv;
mod ops;

pub use conv::{ChannelStats, PoolIndices};

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

/// Allocates a fresh graph/parameter identifier.
pub fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arguments handed to a backward closure.
pub struct Backward<'a, T: Scalar> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: &'a [Var<T>],
    needs: &'a [bool],
}

impl<T: Scalar> Backward<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }

    pub fn input(&self, i: usize) -> &Tensor<T> {
        self.inputs[i].value()
    }
}

type BackwardFn<T> = Box<dyn Fn(&Backward<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a node in the autodiff graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    /// Leaf that does not take part in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf_with(fresh_id(), value, false)
    }

    /// Leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::leaf_with(fresh_id(), value, true)
    }

    /// Differentiable leaf with a caller-provided id (model parameters).
    pub fn parameter(id: usize, value: Tensor<T>) -> Self {
        Self::leaf_with(id, value, true)
    }

    fn leaf_with(id: usize, value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id, value, requires_grad, inputs: Vec::new(), backward: None }))
    }

    /// Records an operation node. When no input requires a gradient the
    /// closure and the inputs are dropped immediately.
    pub fn from_op(
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        backward: impl Fn(&Backward<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(Var::requires_grad);
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            inputs,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.0.value.numel(), 1, "backward() needs a scalar output");
        let seed = Tensor::ones(self.shape());
        self.backward_with(seed)
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        let order = self.topological_order();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            let needs: Vec<bool> = node.0.inputs.iter().map(Var::requires_grad).collect();
            let input_grads = backward(&Backward {
                grad: &grad,
                output: &node.0.value,
                inputs: &node.0.inputs,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.0.inputs.len());
            for (input, g) in node.0.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.numel(), input.value().numel(), "gradient size mismatch");
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(input.id(), g.reshape(input.shape()));
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.inputs.len() {
                let next = node.0.inputs[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Gradients of the leaves reached by a backward pass, keyed by leaf id.
#[derive(Default)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Gradient or zeros shaped like `var`.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Central finite-difference gradient of `f` with respect to `x`.
    pub fn numeric_grad(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    /// Relative error `|a − b| / max(|a|, |b|, floor)` maximised over entries.
    pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    /// Backpropagated and finite-difference gradients of scalar `f` at `x`.
    pub fn gradients(x: &Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let leaf = Var::leaf(x.clone());
        let analytic = f(&leaf).backward().get_or_zeros(&leaf);
        let numeric = numeric_grad(x, 1e-5, |t| f(&Var::constant(t.clone())).item());
        (analytic, numeric)
    }

    /// Like [`gradients`], but returns `None` when the central difference at
    /// step `h` and at `h/4` disagree beyond `tol` relative error, which means
    /// the stencil straddles a kink (ReLU, hinge, argmax switch, bilinear cell
    /// edge) and the point is not differentiable at the probed scale.
    pub fn smooth_gradients(
        x: &Tensor<f64>,
        h: f64,
        tol: f64,
        f: impl Fn(&Var<f64>) -> Var<f64>,
    ) -> Option<(Tensor<f64>, Tensor<f64>)> {
        let leaf = Var::leaf(x.clone());
        let analytic = f(&leaf).backward().get_or_zeros(&leaf);
        let eval = |t: &Tensor<f64>| f(&Var::constant(t.clone())).item();
        let coarse = numeric_grad(x, h, eval);
        let fine = numeric_grad(x, h / 4.0, eval);
        (rel_err(&coarse, &fine, 1e-6) <= tol).then_some((analytic, fine))
    }

    /// Checks backprop against finite differences for `f` at `x`.
    pub fn check_grad(x: &Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>, tol: f64) {
        let (analytic, numeric) = gradients(x, f);
        let err = rel_err(&analytic, &numeric, 1e-3);
        assert!(err < tol, "gradient mismatch {err}: analytic {analytic:?} numeric {numeric:?}");
    }
}
