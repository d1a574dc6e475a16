//! Layers with explicit forward/backward passes.
//!
//! `forward` caches whatever `backward` needs; `backward` consumes the upstream
//! gradient, accumulates parameter gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{mm, mm_at, mm_bt, Tensor};

/// A trainable parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Self::new(vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    /// Trainable parameters, in a fixed order.
    fn params(&mut self) -> Vec<&mut Param>;
    /// Non-trainable state that must survive a checkpoint (running statistics).
    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        Vec::new()
    }
    fn name(&self) -> String;
}

fn kaiming_normal(rng: &mut impl Rng, fan: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan as f64).sqrt();
    let nd = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| nd.sample(rng)).collect()
}

pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cols: Vec<Vec<f64>>,
    in_shape: [usize; 4],
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // He initialisation on fan-out, the usual choice for ReLU conv stacks.
        let weight = Param::new(kaiming_normal(rng, cout * k * k, cout * cin * k * k));
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias: bias.then(|| Param::zeros(cout)),
            cols: Vec::new(),
            in_shape: [0; 4],
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let cols_n = oh * ow;
        let mut cols = vec![0.0; self.cin * k * k * cols_n];
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64], h: usize, w: usize, oh: usize, ow: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let cols_n = oh * ow;
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dx[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(x.n, self.cout, oh, ow);
        self.in_shape = x.shape();
        self.cols.clear();
        for s in 0..x.n {
            let cols = if self.is_pointwise() {
                x.sample(s).to_vec()
            } else {
                self.im2col(x.sample(s), x.h, x.w, oh, ow)
            };
            let dst = out.sample_mut(s);
            mm(&self.weight.value, &cols, dst, self.cout, kk, oh * ow);
            if let Some(b) = &self.bias {
                for (co, bv) in b.value.iter().enumerate() {
                    for v in &mut dst[co * oh * ow..(co + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
            if train {
                self.cols.push(cols);
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, _, h, w] = self.in_shape;
        let (oh, ow) = (grad.h, grad.w);
        let kk = self.cin * self.k * self.k;
        let p = oh * ow;
        let mut dx = Tensor::zeros(n, self.cin, h, w);
        let mut dcols = vec![0.0; kk * p];
        for s in 0..n {
            let g = grad.sample(s);
            mm_bt(g, &self.cols[s], &mut self.weight.grad, self.cout, p, kk);
            if let Some(b) = &mut self.bias {
                for co in 0..self.cout {
                    b.grad[co] += g[co * p..(co + 1) * p].iter().sum::<f64>();
                }
            }
            dcols.iter_mut().for_each(|v| *v = 0.0);
            mm_at(&self.weight.value, g, &mut dcols, kk, self.cout, p);
            if self.is_pointwise() {
                dx.sample_mut(s).copy_from_slice(&dcols);
            } else {
                self.col2im(&dcols, dx.sample_mut(s), h, w, oh, ow);
            }
        }
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    fn name(&self) -> String {
        format!(
            "conv{}x{}({}→{},s{},p{})",
            self.k, self.k, self.cin, self.cout, self.stride, self.pad
        )
    }
}

pub struct BatchNorm2d {
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    eps: f64,
    momentum: f64,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: Param::filled(c, 1.0),
            beta: Param::zeros(c),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
            momentum: 0.1,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: [0; 4],
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, hw) = (x.n, x.c, x.plane());
        let count = (n * hw) as f64;
        let mut out = x.zeros_like();
        self.shape = x.shape();
        if train {
            self.xhat = vec![0.0; x.data.len()];
            self.inv_std = vec![0.0; c];
        }
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    sum += x.data[base..base + hw].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    sq += x.data[base..base + hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data[i] - mean) * inv;
                    if train {
                        self.xhat[i] = xh;
                    }
                    out.data[i] = g * xh + b;
                }
            }
            if train {
                self.inv_std[ch] = inv;
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut dx = grad.zeros_like();
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_g += grad.data[i];
                    sum_gx += grad.data[i] * self.xhat[i];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let k = self.gamma.value[ch] * self.inv_std[ch] / count;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    dx.data[i] = k * (count * grad.data[i] - sum_g - self.xhat[i] * sum_gx);
                }
            }
        }
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    fn name(&self) -> String {
        format!("bn({})", self.c)
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        if train {
            self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = grad.clone();
        for (d, &m) in dx.data.iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn name(&self) -> String {
        "relu".into()
    }
}

pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            stride,
            pad,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let oh = (x.h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (x.w + 2 * self.pad - self.k) / self.stride + 1;
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        self.in_shape = x.shape();
        if train {
            self.argmax = vec![0; out.data.len()];
        }
        for s in 0..x.n {
            for ch in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let i = x.idx(s, ch, iy as usize, ix as usize);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = out.idx(s, ch, oy, ox);
                        out.data[o] = best;
                        if train {
                            self.argmax[o] = best_i;
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (o, &i) in self.argmax.iter().enumerate() {
            dx.data[i] += grad.data[o];
        }
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn name(&self) -> String {
        format!("maxpool{}(s{},p{})", self.k, self.stride, self.pad)
    }
}

/// Non-overlapping average pooling (kernel = stride, no padding).
pub struct AvgPool2d {
    k: usize,
    in_shape: [usize; 4],
}

impl AvgPool2d {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            in_shape: [0; 4],
        }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (oh, ow) = (x.h / self.k, x.w / self.k);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        self.in_shape = x.shape();
        let norm = 1.0 / (self.k * self.k) as f64;
        for s in 0..x.n {
            for ch in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                acc += x.data[x.idx(s, ch, oy * self.k + ky, ox * self.k + kx)];
                            }
                        }
                        let o = out.idx(s, ch, oy, ox);
                        out.data[o] = acc * norm;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let norm = 1.0 / (self.k * self.k) as f64;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..grad.h {
                    for ox in 0..grad.w {
                        let g = grad.data[grad.idx(s, ch, oy, ox)] * norm;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let i = dx.idx(s, ch, oy * self.k + ky, ox * self.k + kx);
                                dx.data[i] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn name(&self) -> String {
        format!("avgpool{}", self.k)
    }
}

#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.buffers()).collect()
    }

    fn name(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.name())
            .collect::<Vec<_>>()
            .join(" → ")
    }
}

/// `y = [x, f(x)]` along channels, the DenseNet connectivity pattern.
pub struct DenseConcat {
    cin: usize,
    inner: Sequential,
}

impl DenseConcat {
    pub fn new(cin: usize, inner: Sequential) -> Self {
        Self { cin, inner }
    }
}

impl Layer for DenseConcat {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let new = self.inner.forward(x, train);
        Tensor::concat_channels(x, &new)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (g_x, g_new) = grad.split_channels(self.cin);
        let mut dx = self.inner.backward(&g_new);
        dx.add_assign(&g_x);
        dx
    }

    fn params(&mut self) -> Vec<&mut Param> {
        self.inner.params()
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        self.inner.buffers()
    }

    fn name(&self) -> String {
        format!("dense[{}]", self.inner.name())
    }
}
