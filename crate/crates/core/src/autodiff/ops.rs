//! Element-wise, reduction, indexing and linear-algebra operations.

use super::Var;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

fn strides_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(value, vec![self.clone(), other.clone()], |b| {
            vec![b.needs(0).then(|| b.grad.clone()), b.needs(1).then(|| b.grad.clone())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(value, vec![self.clone(), other.clone()], |b| {
            vec![b.needs(0).then(|| b.grad.clone()), b.needs(1).then(|| b.grad.map(|g| -g))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(value, vec![self.clone(), other.clone()], |b| {
            vec![
                b.needs(0).then(|| b.grad.zip_map(b.input(1), |g, y| g * y)),
                b.needs(1).then(|| b.grad.zip_map(b.input(0), |g, x| g * x)),
            ]
        })
    }

    /// Adds a one-element var to every entry.
    pub fn add_broadcast(&self, s: &Var<T>) -> Var<T> {
        let sv = s.item();
        let value = self.value().map(|x| x + sv);
        Var::from_op(value, vec![self.clone(), s.clone()], |b| {
            vec![b.needs(0).then(|| b.grad.clone()), b.needs(1).then(|| Tensor::scalar(b.grad.sum()))]
        })
    }

    /// Multiplies every entry by a one-element var.
    pub fn mul_broadcast(&self, s: &Var<T>) -> Var<T> {
        let sv = s.item();
        let value = self.value().map(|x| x * sv);
        Var::from_op(value, vec![self.clone(), s.clone()], move |b| {
            vec![
                b.needs(0).then(|| b.grad.scale(sv)),
                b.needs(1).then(|| {
                    let dot: T = b.grad.data().iter().zip(b.input(0).data()).map(|(&g, &x)| g * x).sum();
                    Tensor::scalar(dot)
                }),
            ]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        Var::from_op(self.value().scale(s), vec![self.clone()], move |b| vec![Some(b.grad.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        Var::from_op(self.value().map(|x| x + s), vec![self.clone()], |b| vec![Some(b.grad.clone())])
    }

    pub fn square(&self) -> Var<T> {
        let two = T::lit(2.0);
        Var::from_op(self.value().map(|x| x * x), vec![self.clone()], move |b| {
            vec![Some(b.grad.zip_map(b.input(0), |g, x| two * g * x))]
        })
    }

    /// Square root whose derivative is taken as zero at exactly zero.
    pub fn sqrt(&self) -> Var<T> {
        let half = T::lit(0.5);
        let value = self.value().map(|x| x.max(T::zero()).sqrt());
        Var::from_op(value, vec![self.clone()], move |b| {
            vec![Some(b.grad.zip_map(b.output, |g, y| if y > T::zero() { g * half / y } else { T::zero() }))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let slope = T::lit(slope);
        let value = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        Var::from_op(value, vec![self.clone()], move |b| {
            vec![Some(b.grad.zip_map(b.input(0), |g, x| if x > T::zero() { g } else { g * slope }))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        Var::from_op(value, vec![self.clone()], |b| {
            vec![Some(b.grad.zip_map(b.output, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn tanh(&self) -> Var<T> {
        let value = self.value().map(|x| x.tanh());
        Var::from_op(value, vec![self.clone()], |b| {
            vec![Some(b.grad.zip_map(b.output, |g, y| g * (T::one() - y * y)))]
        })
    }

    /// Multiplies by a fixed mask (dropout, gating).
    pub fn mul_const(&self, mask: Tensor<T>) -> Var<T> {
        let value = self.value().zip_map(&mask, |a, m| a * m);
        Var::from_op(value, vec![self.clone()], move |b| vec![Some(b.grad.zip_map(&mask, |g, m| g * m))])
    }

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(Tensor::scalar(self.value().sum()), vec![self.clone()], move |b| {
            vec![Some(Tensor::full(&shape, b.grad.item()))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums a `[N, D]` tensor over its last axis, giving `[N]`.
    pub fn sum_rows(&self) -> Var<T> {
        assert_eq!(self.value().ndim(), 2, "sum_rows expects a matrix");
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data = self.value().data().chunks(d).map(|row| row.iter().copied().sum()).collect();
        Var::from_op(Tensor::from_vec(&[n], data), vec![self.clone()], move |b| {
            let g = b.grad.data().iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
            vec![Some(Tensor::from_vec(&[n, d], g))]
        })
    }

    /// Euclidean norm of every row of a `[N, D]` tensor.
    pub fn row_norms(&self) -> Var<T> {
        self.square().sum_rows().sqrt()
    }

    /// Rows scaled to unit L2 norm (rows with norm below `eps` are divided by `eps`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Var<T> {
        assert_eq!(self.value().ndim(), 2, "l2_normalize_rows expects a matrix");
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let eps = T::lit(eps);
        let norms: Vec<T> = self
            .value()
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let mut out = self.value().clone();
        for (row, &nrm) in out.data_mut().chunks_mut(d).zip(&norms) {
            let denom = nrm.max(eps);
            row.iter_mut().for_each(|x| *x = *x / denom);
        }
        Var::from_op(out, vec![self.clone()], move |b| {
            let mut g = b.grad.clone();
            for ((grow, yrow), &nrm) in g.data_mut().chunks_mut(d).zip(b.output.data().chunks(d)).zip(&norms) {
                if nrm > eps {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &y)| a * y).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = (*gi - yi * dot) / nrm;
                    }
                } else {
                    grow.iter_mut().for_each(|gi| *gi = *gi / eps);
                }
            }
            vec![Some(g.reshape(&[n, d]))]
        })
    }

    /// Selects rows (leading-axis entries) by index; repeated indices allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<T> {
        let shape = self.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let src = self.value().data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        Var::from_op(Tensor::from_vec(&out_shape, data), vec![self.clone()], move |b| {
            let mut g = Tensor::zeros(&shape);
            let gd = g.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                let src = &b.grad.data()[k * inner..(k + 1) * inner];
                for (dst, &s) in gd[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
            vec![Some(g)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let old = self.shape().to_vec();
        Var::from_op(self.value().clone().reshape(shape), vec![self.clone()], move |b| {
            vec![Some(b.grad.clone().reshape(&old))]
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, dim, inner) = strides_around(&shape, axis);
        assert!(start + len <= dim, "narrow out of range");
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Var::from_op(Tensor::from_vec(&out_shape, data), vec![self.clone()], move |b| {
            let mut g = Tensor::zeros(&shape);
            let gd = g.data_mut();
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gd[base..base + len * inner]
                    .copy_from_slice(&b.grad.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        let (outer, _, inner) = strides_around(&first, axis);
        let dims: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (k, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(k == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.value().data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op(Tensor::from_vec(&shape, data), parts.to_vec(), move |b| {
            let g = b.grad.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(dims.len());
            for (k, &d) in dims.iter().enumerate() {
                if !b.needs(k) {
                    out.push(None);
                    offset += d;
                    continue;
                }
                let mut part = Vec::with_capacity(outer * d * inner);
                for o in 0..outer {
                    let base = o * total * inner + offset * inner;
                    part.extend_from_slice(&g[base..base + d * inner]);
                }
                out.push(Some(Tensor::from_vec(&part_shapes[k], part)));
                offset += d;
            }
            out
        })
    }

    pub fn transpose2d(&self) -> Var<T> {
        assert_eq!(self.value().ndim(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let t = transpose(self.value().data(), r, c);
        Var::from_op(Tensor::from_vec(&[c, r], t), vec![self.clone()], move |b| {
            vec![Some(Tensor::from_vec(&[r, c], transpose(b.grad.data(), c, r)))]
        })
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(self.value().data(), m, k), MatRef::new(other.value().data(), k, n), &mut out, T::one(), T::zero());
        Var::from_op(Tensor::from_vec(&[m, n], out), vec![self.clone(), other.clone()], move |b| {
            let ga = b.needs(0).then(|| {
                let mut g = vec![T::zero(); m * k];
                gemm(MatRef::new(b.grad.data(), m, n), MatRef::t(b.input(1).data(), n, k), &mut g, T::one(), T::zero());
                Tensor::from_vec(&[m, k], g)
            });
            let gb = b.needs(1).then(|| {
                let mut g = vec![T::zero(); k * n];
                gemm(MatRef::t(b.input(0).data(), k, m), MatRef::new(b.grad.data(), m, n), &mut g, T::one(), T::zero());
                Tensor::from_vec(&[k, n], g)
            });
            vec![ga, gb]
        })
    }

    /// Per-row Euclidean distance between two `[N, D]` tensors.
    pub fn row_distances(&self, other: &Var<T>) -> Var<T> {
        self.sub(other).row_norms()
    }
}

pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}
