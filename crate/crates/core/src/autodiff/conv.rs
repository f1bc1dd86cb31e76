//! Image-shaped operations: convolution, pooling, pixel shuffle,
//! channel normalisation and bilinear sampling.
//!
//! Layout is NCHW throughout. Convolutions use "same" zero padding and unit
//! stride, which is all the networks here need.

use super::Var;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of elements each statistic was computed over.
    pub count: usize,
}

/// Flat input index of the maximum for each pooled output element.
#[derive(Clone, Debug)]
pub struct PoolIndices(pub Vec<u32>);

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx_out[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w + x0..y * w + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let drow = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// Same-padded, unit-stride 2D convolution.
    ///
    /// `self`: `[B, C, H, W]`, `weight`: `[O, C, k, k]` with odd `k`,
    /// `bias`: `[O]`. Returns `[B, O, H, W]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>) -> Var<T> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch: input {c}, weight {}", ws[1]);
        assert!(k % 2 == 1 && ws[3] == k, "conv2d needs a square odd kernel");
        assert_eq!(bias.shape(), &[o]);
        let hw = h * w;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); b * o * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let wd = weight.value().data();
        let bd = bias.value().data();
        for bi in 0..b {
            let xin = &self.value().data()[bi * c * hw..(bi + 1) * c * hw];
            let src: &[T] = if k == 1 {
                xin
            } else {
                im2col(xin, c, h, w, k, &mut cols);
                &cols
            };
            let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
            for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(bd[oc]);
            }
            gemm(MatRef::new(wd, o, ckk), MatRef::new(src, ckk, hw), dst, T::one(), T::one());
        }
        let value = Tensor::from_vec(&[b, o, h, w], out);
        Var::from_op(value, vec![self.clone(), weight.clone(), bias.clone()], move |bw| {
            let x = bw.input(0).data();
            let wd = bw.input(1).data();
            let g = bw.grad.data();
            let mut dx = bw.needs(0).then(|| vec![T::zero(); b * c * hw]);
            let mut dw = bw.needs(1).then(|| vec![T::zero(); o * ckk]);
            let db = bw.needs(2).then(|| {
                let mut db = vec![T::zero(); o];
                for bi in 0..b {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let s = (bi * o + oc) * hw;
                        *acc += g[s..s + hw].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(&[o], db)
            });
            let mut cols = if k == 1 || dw.is_none() { Vec::new() } else { vec![T::zero(); ckk * hw] };
            let mut dcols = if k == 1 || dx.is_none() { Vec::new() } else { vec![T::zero(); ckk * hw] };
            for bi in 0..b {
                let gb = &g[bi * o * hw..(bi + 1) * o * hw];
                let xin = &x[bi * c * hw..(bi + 1) * c * hw];
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if k == 1 {
                        xin
                    } else {
                        im2col(xin, c, h, w, k, &mut cols);
                        &cols
                    };
                    gemm(MatRef::new(gb, o, hw), MatRef::t(src, hw, ckk), dw, T::one(), T::one());
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * c * hw..(bi + 1) * c * hw];
                    if k == 1 {
                        gemm(MatRef::t(wd, ckk, o), MatRef::new(gb, o, hw), dxb, T::one(), T::zero());
                    } else {
                        gemm(MatRef::t(wd, ckk, o), MatRef::new(gb, o, hw), &mut dcols, T::one(), T::zero());
                        col2im_add(&dcols, c, h, w, k, dxb);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_vec(&[b, c, h, w], d)),
                dw.map(|d| Tensor::from_vec(&[o, c, k, k], d)),
                db,
            ]
        })
    }

    /// 2×2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&self) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value().data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut idx = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let cands = [
                        base + 2 * y * w + 2 * xo,
                        base + 2 * y * w + 2 * xo + 1,
                        base + (2 * y + 1) * w + 2 * xo,
                        base + (2 * y + 1) * w + 2 * xo + 1,
                    ];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
        let numel = b * c * h * w;
        Var::from_op(Tensor::from_vec(&[b, c, ho, wo], out), vec![self.clone()], move |bw| {
            let mut g = vec![T::zero(); numel];
            for (&i, &gv) in idx.iter().zip(bw.grad.data()) {
                g[i as usize] += gv;
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], g))]
        })
    }

    /// Sub-pixel rearrangement `[B, C·r², H, W] → [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, cr, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(cr % (r * r), 0, "pixel_shuffle channels must divide by r²");
        let c = cr / (r * r);
        let (ho, wo) = (h * r, w * r);
        // out flat index -> in flat index
        let mut map = Vec::with_capacity(b * cr * h * w);
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let (i, j) = (y % r, x % r);
                        let src = ((bi * cr + ch * r * r + i * r + j) * h + y / r) * w + x / r;
                        map.push(src as u32);
                    }
                }
            }
        }
        let xd = self.value().data();
        let out: Vec<T> = map.iter().map(|&m| xd[m as usize]).collect();
        Var::from_op(Tensor::from_vec(&[b, c, ho, wo], out), vec![self.clone()], move |bw| {
            let mut g = vec![T::zero(); map.len()];
            for (&m, &gv) in map.iter().zip(bw.grad.data()) {
                g[m as usize] = gv;
            }
            vec![Some(Tensor::from_vec(&[b, cr, h, w], g))]
        })
    }

    /// Standardises each channel of `[B, C, ...]` using statistics over the
    /// batch and all trailing axes. Returns the output and the statistics.
    pub fn channel_standardize(&self, eps: f64) -> (Var<T>, ChannelStats<T>) {
        let s = self.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        let l: usize = s[2..].iter().product();
        let m = b * l;
        let x = self.value().data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * l;
                acc += x[base..base + l].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mu = acc / m as f64;
            let mut sq = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * l;
                sq += x[base..base + l].iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
            }
            mean[ch] = T::lit(mu);
            var[ch] = T::lit(sq / m as f64);
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                let (mu, is) = (mean[ch], invstd[ch]);
                for (o, &v) in y[base..base + l].iter_mut().zip(&x[base..base + l]) {
                    *o = (v - mu) * is;
                }
            }
        }
        let stats = ChannelStats { mean, var, count: m };
        let out = Var::from_op(Tensor::from_vec(&s, y), vec![self.clone()], move |bw| {
            let g = bw.grad.data();
            let yv = bw.output.data();
            let mut dx = vec![T::zero(); g.len()];
            let mt = T::lit(m as f64);
            for ch in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gy = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * l;
                    for i in base..base + l {
                        sum_g += g[i];
                        sum_gy += g[i] * yv[i];
                    }
                }
                let k = invstd[ch] / mt;
                for bi in 0..b {
                    let base = (bi * c + ch) * l;
                    for i in base..base + l {
                        dx[i] = k * (mt * g[i] - sum_g - yv[i] * sum_gy);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&s, dx))]
        });
        (out, stats)
    }

    /// Standardises channels with fixed (e.g. running) statistics.
    pub fn channel_normalize_fixed(&self, mean: &[T], var: &[T], eps: f64) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        assert_eq!(mean.len(), c);
        let l: usize = s[2..].iter().product();
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mut y = self.value().data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                y[base..base + l].iter_mut().for_each(|v| *v = (*v - mean[ch]) * invstd[ch]);
            }
        }
        Var::from_op(Tensor::from_vec(&s, y), vec![self.clone()], move |bw| {
            let mut g = bw.grad.clone();
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * l;
                    g.data_mut()[base..base + l].iter_mut().for_each(|v| *v *= invstd[ch]);
                }
            }
            vec![Some(g)]
        })
    }

    /// Per-channel `x * gamma[c] + beta[c]` on `[B, C, ...]`.
    pub fn channel_affine(&self, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        let l: usize = s[2..].iter().product();
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let mut y = self.value().data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                y[base..base + l].iter_mut().for_each(|v| *v = *v * gd[ch] + bd[ch]);
            }
        }
        Var::from_op(Tensor::from_vec(&s, y), vec![self.clone(), gamma.clone(), beta.clone()], move |bw| {
            let g = bw.grad.data();
            let x = bw.input(0).data();
            let gam = bw.input(1).data();
            let dx = bw.needs(0).then(|| {
                let mut dx = g.to_vec();
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        dx[base..base + l].iter_mut().for_each(|v| *v *= gam[ch]);
                    }
                }
                Tensor::from_vec(&s, dx)
            });
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * l;
                    for i in base..base + l {
                        dg[ch] += g[i] * x[i];
                        db[ch] += g[i];
                    }
                }
            }
            vec![dx, Some(Tensor::from_vec(&[c], dg)), Some(Tensor::from_vec(&[c], db))]
        })
    }

    /// Bilinear lookup of a `[C, Hm, Wm]` map at `[N, 2]` grid coordinates
    /// `(x, y)`. Coordinates outside the grid are clamped to the border and
    /// receive no gradient along the clamped axis. Returns `[N, C]` and a
    /// per-point flag telling whether any clamping happened.
    pub fn sample_bilinear(&self, points: &Var<T>) -> (Var<T>, Vec<bool>) {
        let ms = self.shape().to_vec();
        assert_eq!(ms.len(), 3, "sample_bilinear map must be [C, H, W]");
        let (c, hm, wm) = (ms[0], ms[1], ms[2]);
        let n = points.shape()[0];
        assert_eq!(points.shape(), &[n, 2]);
        let plane = hm * wm;
        let pd = points.value().data();
        struct Tap<T> {
            idx: [usize; 4],
            wts: [T; 4],
            fx: T,
            fy: T,
            free_x: bool,
            free_y: bool,
        }
        let axis = |v: T, size: usize| -> (usize, usize, T, bool) {
            let hi = T::lit((size - 1) as f64);
            let clamped = v < T::zero() || v > hi;
            let v = v.max(T::zero()).min(hi);
            if size == 1 {
                return (0, 0, T::zero(), !clamped);
            }
            let i0 = v.floor().to_usize().unwrap_or(0).min(size - 2);
            (i0, i0 + 1, v - T::lit(i0 as f64), !clamped)
        };
        let mut taps = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for p in pd.chunks(2) {
            let (x0, x1, fx, free_x) = axis(p[0], wm);
            let (y0, y1, fy, free_y) = axis(p[1], hm);
            let one = T::one();
            taps.push(Tap {
                idx: [y0 * wm + x0, y0 * wm + x1, y1 * wm + x0, y1 * wm + x1],
                wts: [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx],
                fx,
                fy,
                free_x,
                free_y,
            });
            mask.push(!(free_x && free_y));
        }
        let md = self.value().data();
        let mut out = vec![T::zero(); n * c];
        for (i, t) in taps.iter().enumerate() {
            let row = &mut out[i * c..(i + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * plane;
                *o = (0..4).map(|q| t.wts[q] * md[base + t.idx[q]]).sum();
            }
        }
        let value = Tensor::from_vec(&[n, c], out);
        let var = Var::from_op(value, vec![self.clone(), points.clone()], move |bw| {
            let g = bw.grad.data();
            let dmap = bw.needs(0).then(|| {
                let mut dm = vec![T::zero(); c * plane];
                for (i, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g[i * c + ch];
                        let base = ch * plane;
                        for q in 0..4 {
                            dm[base + t.idx[q]] += t.wts[q] * gv;
                        }
                    }
                }
                Tensor::from_vec(&[c, hm, wm], dm)
            });
            let dpts = bw.needs(1).then(|| {
                let md = bw.input(0).data();
                let one = T::one();
                let mut dp = vec![T::zero(); n * 2];
                for (i, t) in taps.iter().enumerate() {
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let base = ch * plane;
                        let v = [md[base + t.idx[0]], md[base + t.idx[1]], md[base + t.idx[2]], md[base + t.idx[3]]];
                        let gv = g[i * c + ch];
                        gx += gv * ((one - t.fy) * (v[1] - v[0]) + t.fy * (v[3] - v[2]));
                        gy += gv * ((one - t.fx) * (v[2] - v[0]) + t.fx * (v[3] - v[1]));
                    }
                    if t.free_x && wm > 1 {
                        dp[2 * i] = gx;
                    }
                    if t.free_y && hm > 1 {
                        dp[2 * i + 1] = gy;
                    }
                }
                Tensor::from_vec(&[n, 2], dp)
            });
            vec![dmap, dpts]
        });
        (var, mask)
    }
}
