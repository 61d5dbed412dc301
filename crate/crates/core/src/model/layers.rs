//! Layers with explicit backward passes.
//!
//! Every `forward` returns whatever its `backward` needs; parameter gradients
//! accumulate into [`Param::grad`] until the optimizer clears them.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tensor::{matmul, Real, Tensor, Trans};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<R>,
    pub grad: Vec<R>,
}

impl<R: Real> Param<R> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<R>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![R::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![R::zero(); len])
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: R) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    pub fn normal(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..len).map(|_| R::of(dist.sample(rng))).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = R::zero());
    }

    pub fn cast<S: Real>(&self) -> Param<S> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| S::of(v.f64())).collect(),
            grad: self.grad.iter().map(|v| S::of(v.f64())).collect(),
        }
    }
}

/// Square-kernel convolution, stride 1, zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col<R: Real>(x: &[R], c: usize, h: usize, w: usize, k: usize, cols: &mut Vec<R>) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    cols.clear();
    cols.resize(c * k * k * plane, R::zero());
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let dst = &mut cols[row + y * w + x_lo..row + y * w + x_hi];
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst.copy_from_slice(&src[s0 + sx0..s0 + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<R: Real>(cols: &[R], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [R]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut dx_out[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let src = &cols[row + y * w + x_lo..row + y * w + x_hi];
                    for (d, s) in dst[s0 + sx0..s0 + sx0 + (x_hi - x_lo)].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl<R: Real> Conv2d<R> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![cout, cin, k, k], (gain / fan_in).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.c, self.cin, "{}: input channels", self.weight.name);
        let plane = x.plane();
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut cols = Vec::new();
        for i in 0..x.n {
            let out = y.sample_mut(i);
            for (co, b) in self.bias.value.iter().enumerate() {
                out[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *b);
            }
            let src: &[R] = if self.k == 1 {
                x.sample(i)
            } else {
                im2col(x.sample(i), x.c, x.h, x.w, self.k, &mut cols);
                &cols
            };
            matmul(self.cout, kk, plane, &self.weight.value, Trans::No, src, Trans::No, out, R::one(), R::one());
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor<R>, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let plane = x.plane();
        let kk = self.cin * self.k * self.k;
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut cols = Vec::new();
        let mut dcols = vec![R::zero(); if self.k == 1 { 0 } else { kk * plane }];
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                self.bias.grad[co] += g[co * plane..(co + 1) * plane].iter().copied().sum::<R>();
            }
            let src: &[R] = if self.k == 1 {
                x.sample(i)
            } else {
                im2col(x.sample(i), x.c, x.h, x.w, self.k, &mut cols);
                &cols
            };
            // dW[cout, kk] += dy[cout, plane] · cols[kk, plane]^T
            matmul(self.cout, plane, kk, g, Trans::No, src, Trans::Yes, &mut self.weight.grad, R::one(), R::one());
            if let Some(dx) = dx.as_mut() {
                if self.k == 1 {
                    matmul(kk, self.cout, plane, &self.weight.value, Trans::Yes, g, Trans::No, dx.sample_mut(i), R::one(), R::zero());
                } else {
                    matmul(kk, self.cout, plane, &self.weight.value, Trans::Yes, g, Trans::No, &mut dcols, R::one(), R::zero());
                    col2im(&dcols, x.c, x.h, x.w, self.k, dx.sample_mut(i));
                }
            }
        }
        dx
    }
}

/// 2×2 stride-2 transposed convolution (learned upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2<R> {
    /// `[cin, cout, 2, 2]`.
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub cin: usize,
    pub cout: usize,
}

impl<R: Real> ConvTranspose2<R> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        let (hi, wi) = (x.h, x.w);
        let pin = hi * wi;
        let (ho, wo) = (2 * hi, 2 * wi);
        let m = self.cout * 4;
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let mut y4 = vec![R::zero(); m * pin];
        for i in 0..x.n {
            matmul(m, self.cin, pin, &self.weight.value, Trans::Yes, x.sample(i), Trans::No, &mut y4, R::one(), R::zero());
            let out = y.sample_mut(i);
            for co in 0..self.cout {
                let b = self.bias.value[co];
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &y4[(co * 4 + a * 2 + bb) * pin..(co * 4 + a * 2 + bb + 1) * pin];
                        for yy in 0..hi {
                            let dst = (co * ho + 2 * yy + a) * wo + bb;
                            for xx in 0..wi {
                                out[dst + 2 * xx] = row[yy * wi + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
        let (hi, wi) = (x.h, x.w);
        let pin = hi * wi;
        let (ho, wo) = (2 * hi, 2 * wi);
        let m = self.cout * 4;
        let mut dx = Tensor::zeros(x.n, x.c, hi, wi);
        let mut dy4 = vec![R::zero(); m * pin];
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                let mut bsum = R::zero();
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut dy4[(co * 4 + a * 2 + bb) * pin..(co * 4 + a * 2 + bb + 1) * pin];
                        for yy in 0..hi {
                            let src = (co * ho + 2 * yy + a) * wo + bb;
                            for xx in 0..wi {
                                let v = g[src + 2 * xx];
                                row[yy * wi + xx] = v;
                                bsum += v;
                            }
                        }
                    }
                }
                self.bias.grad[co] += bsum;
            }
            // dW[cin, m] += x[cin, pin] · dy4[m, pin]^T
            matmul(self.cin, pin, m, x.sample(i), Trans::No, &dy4, Trans::Yes, &mut self.weight.grad, R::one(), R::one());
            matmul(self.cin, m, pin, &self.weight.value, Trans::No, &dy4, Trans::No, dx.sample_mut(i), R::one(), R::zero());
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<R> {
    xhat: Vec<R>,
    inv_std: Vec<R>,
}

impl<R: Real> GroupNorm<R> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "{name}: {channels} channels into {groups} groups");
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], R::one()),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> (Tensor<R>, GroupNormCache<R>) {
        let c = x.c;
        let cg = c / self.groups;
        let plane = x.plane();
        let m = cg * plane;
        let mut y = x.clone();
        let mut xhat = vec![R::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        let eps = R::of(self.eps);
        let mf = R::of(m as f64);
        for i in 0..x.n {
            for g in 0..self.groups {
                let off = i * c * plane + g * m;
                let seg = &x.data[off..off + m];
                let mean = seg.iter().copied().sum::<R>() / mf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / mf;
                let istd = R::one() / (var + eps).sqrt();
                inv_std.push(istd);
                for (j, &v) in seg.iter().enumerate() {
                    let ch = g * cg + j / plane;
                    let xh = (v - mean) * istd;
                    xhat[off + j] = xh;
                    y.data[off + j] = xh * self.gamma.value[ch] + self.beta.value[ch];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<R>, dy: &Tensor<R>) -> Tensor<R> {
        let c = dy.c;
        let cg = c / self.groups;
        let plane = dy.plane();
        let m = cg * plane;
        let mf = R::of(m as f64);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        let mut dxhat = vec![R::zero(); m];
        for i in 0..dy.n {
            for g in 0..self.groups {
                let off = i * c * plane + g * m;
                let (mut s1, mut s2) = (R::zero(), R::zero());
                for j in 0..m {
                    let ch = g * cg + j / plane;
                    let d = dy.data[off + j];
                    let xh = cache.xhat[off + j];
                    self.gamma.grad[ch] += d * xh;
                    self.beta.grad[ch] += d;
                    let dxh = d * self.gamma.value[ch];
                    dxhat[j] = dxh;
                    s1 += dxh;
                    s2 += dxh * xh;
                }
                let istd = cache.inv_std[i * self.groups + g];
                for j in 0..m {
                    let xh = cache.xhat[off + j];
                    dx.data[off + j] = istd / mf * (mf * dxhat[j] - s1 - xh * s2);
                }
            }
        }
        dx
    }
}

/// Fully connected layer on `[n, features, 1, 1]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<R> {
    /// `[out, in]`.
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<R: Real> Dense<R> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![fan_out, fan_in], (gain / fan_in as f64).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), vec![fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.sample_len(), self.fan_in, "{}: input width", self.weight.name);
        let mut y = Tensor::zeros(x.n, self.fan_out, 1, 1);
        for i in 0..x.n {
            y.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        matmul(x.n, self.fan_in, self.fan_out, &x.data, Trans::No, &self.weight.value, Trans::Yes, &mut y.data, R::one(), R::one());
        y
    }

    pub fn backward(&mut self, x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
        let n = x.n;
        for i in 0..n {
            for (b, g) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *b += *g;
            }
        }
        matmul(self.fan_out, n, self.fan_in, &dy.data, Trans::Yes, &x.data, Trans::No, &mut self.weight.grad, R::one(), R::one());
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        matmul(n, self.fan_out, self.fan_in, &dy.data, Trans::No, &self.weight.value, Trans::No, &mut dx.data, R::one(), R::zero());
        dx
    }
}

pub fn relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v > R::zero() { v } else { R::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<R: Real>(out: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&out.data) {
        if o <= R::zero() {
            *d = R::zero();
        }
    }
    dx
}

pub fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

/// 2×2 max pooling; the cache holds the winning input offset per output.
pub fn maxpool2<R: Real>(x: &Tensor<R>) -> (Tensor<R>, Vec<u32>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut arg = vec![0u32; y.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for yy in 0..ho {
            for xx in 0..wo {
                let mut best = 2 * yy * x.w + 2 * xx;
                for cand in [best + 1, best + x.w, best + x.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = nc * ho * wo + yy * wo + xx;
                y.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<R: Real>(arg: &[u32], dy: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let po = dy.plane();
    for nc in 0..dy.n * dy.c {
        for j in 0..po {
            dx.data[nc * h * w + arg[nc * po + j] as usize] += dy.data[nc * po + j];
        }
    }
    dx
}

/// Inverted dropout mask (`0` or `1 / (1 - p)`), or `None` when inactive.
pub fn dropout_mask<R: Real>(len: usize, p: f64, rng: Option<&mut Rng>) -> Option<Vec<R>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = R::of(1.0 / (1.0 - p));
    Some((0..len).map(|_| if rng.gen::<f64>() < p { R::zero() } else { keep }).collect())
}

pub fn apply_mask<R: Real>(x: &Tensor<R>, mask: Option<&Vec<R>>) -> Tensor<R> {
    match mask {
        None => x.clone(),
        Some(m) => {
            let mut y = x.clone();
            for (v, k) in y.data.iter_mut().zip(m) {
                *v *= *k;
            }
            y
        }
    }
}
