//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Activations are NCHW `f32` buffers. Every layer caches what its backward
//! pass needs when run with `train = true`; parameter gradients accumulate
//! into [`Param::grad`] until [`Param::zero_grad`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// `[batch, channels, height, width]`
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(len, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Momentum buffer of the optimizer.
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Mutable view handed to [`Module::visit`].
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Vec<f32>),
}

pub trait Module {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor>;

    /// Consumes the gradient w.r.t. the last training-mode output and
    /// returns the gradient w.r.t. its input.
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    /// Visits parameters and buffers in a fixed order with stable names.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));

    fn output_shape(&self, input: [usize; 4]) -> [usize; 4];

    fn param_count(&self) -> usize;
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidConfig(format!("{layer}: backward called without a training forward pass"))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Either 1 (dense) or `in_channels == out_channels` (depthwise).
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: [usize; 4],
    /// im2col buffers for dense convs, the raw input for depthwise ones.
    saved: Vec<f32>,
}

impl Conv2d {
    /// Kaiming-normal (fan-in) initialized convolution without bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let depthwise = groups == in_channels && groups == out_channels;
        if !(groups == 1 || depthwise) || stride == 0 || kernel == 0 {
            return Err(Error::InvalidConfig(format!(
                "unsupported conv: {in_channels}->{out_channels} k{kernel} s{stride} g{groups}"
            )));
        }
        let fan_in = in_channels / groups * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = out_channels * fan_in;
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight: Param::new(value),
            bias: None,
            cache: None,
        })
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape;
        if c != self.in_channels || h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(
                format!("[N, {}, >={k}, >={k}]", self.in_channels, k = self.kernel),
                format!("{:?}", x.shape),
            ));
        }
        Ok(())
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, col: &mut [f32]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *o = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn depthwise_forward(&self, x: &[f32], h: usize, w: usize, out: &mut [f32]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            let wk = &self.weight.value[c * k * k..(c + 1) * k * k];
            let o = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += wk[ky * k + kx] * plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    o[oy * ow + ox] = acc;
                }
            }
        }
    }

    /// Returns the input gradient of one sample and accumulates `dw`.
    fn depthwise_backward(&self, x: &[f32], h: usize, w: usize, dy: &[f32], dw: &mut [f32]) -> Vec<f32> {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let mut dx = vec![0.0f32; x.len()];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            let dplane = &mut dx[c * h * w..(c + 1) * h * w];
            let wk = &self.weight.value[c * k * k..(c + 1) * k * k];
            let dwk = &mut dw[c * k * k..(c + 1) * k * k];
            let g = &dy[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[oy * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                let idx = iy as usize * w + ix as usize;
                                dwk[ky * k + kx] += go * plane[idx];
                                dplane[idx] += go * wk[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers sized for the given shapes and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let out_len = out.item_len();
        let in_len = x.item_len();
        if self.is_depthwise() {
            out.data
                .par_chunks_mut(out_len)
                .zip(x.data.par_chunks(in_len))
                .for_each(|(o, xi)| self.depthwise_forward(xi, h, w, o));
            self.cache = train.then(|| ConvCache {
                input_shape: x.shape,
                saved: x.data.clone(),
            });
        } else {
            let kk = self.in_channels * self.kernel * self.kernel;
            let p = oh * ow;
            let mut cols = vec![0.0f32; n * kk * p];
            cols.par_chunks_mut(kk * p)
                .zip(out.data.par_chunks_mut(out_len))
                .zip(x.data.par_chunks(in_len))
                .for_each(|((col, o), xi)| {
                    self.im2col(xi, h, w, col);
                    gemm(self.out_channels, kk, p, &self.weight.value, (kk, 1), col, (p, 1), 0.0, o);
                });
            self.cache = train.then(|| ConvCache {
                input_shape: x.shape,
                saved: cols,
            });
        }
        if let Some(b) = &self.bias {
            let p = oh * ow;
            for item in out.data.chunks_mut(out_len) {
                for (c, plane) in item.chunks_mut(p).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b.value[c]);
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let [n, _, h, w] = cache.input_shape;
        let (oh, ow) = self.out_hw(h, w);
        if grad.shape != [n, self.out_channels, oh, ow] {
            return Err(Error::shape(
                format!("{:?}", [n, self.out_channels, oh, ow]),
                format!("{:?}", grad.shape),
            ));
        }
        let p = oh * ow;
        let g_len = grad.item_len();
        let in_len = self.in_channels * h * w;
        if let Some(b) = &mut self.bias {
            for item in grad.data.chunks(g_len) {
                for (c, plane) in item.chunks(p).enumerate() {
                    b.grad[c] += plane.iter().sum::<f32>();
                }
            }
        }
        let mut dx = Tensor::zeros(cache.input_shape);
        if self.is_depthwise() {
            let wlen = self.weight.len();
            let parts: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut dw = vec![0.0f32; wlen];
                    let xi = &cache.saved[i * in_len..(i + 1) * in_len];
                    let dxi = self.depthwise_backward(xi, h, w, grad.item(i), &mut dw);
                    (dxi, dw)
                })
                .collect();
            for (i, (dxi, dw)) in parts.into_iter().enumerate() {
                dx.data[i * in_len..(i + 1) * in_len].copy_from_slice(&dxi);
                for (a, b) in self.weight.grad.iter_mut().zip(dw) {
                    *a += b;
                }
            }
        } else {
            let kk = self.in_channels * self.kernel * self.kernel;
            let oc = self.out_channels;
            // dW += dY * col^T, accumulated sample by sample in order.
            for i in 0..n {
                let col = &cache.saved[i * kk * p..(i + 1) * kk * p];
                gemm(oc, p, kk, grad.item(i), (p, 1), col, (1, p), 1.0, &mut self.weight.grad);
            }
            let wv = &self.weight.value;
            dx.data
                .par_chunks_mut(in_len)
                .enumerate()
                .for_each(|(i, dxi)| {
                    let mut dcol = vec![0.0f32; kk * p];
                    gemm(kk, oc, p, wv, (1, kk), grad.item(i), (p, 1), 0.0, &mut dcol);
                    self.col2im(&dcol, h, w, dxi);
                });
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), Slot::Param(b));
        }
    }

    fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        let (oh, ow) = self.out_hw(input[2], input[3]);
        [input[0], self.out_channels, oh, ow]
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let [n, c, h, w] = x.shape;
        if c != self.channels {
            return Err(Error::shape(self.channels, c));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut out = Tensor::zeros(x.shape);
        if !train {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for (o, v) in out.data[off..off + hw].iter_mut().zip(&x.data[off..off + hw]) {
                        *o = v * scale + shift;
                    }
                }
            }
            return Ok(out);
        }
        let mut x_hat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for v in &x.data[off..off + hw] {
                    sum += *v as f64;
                }
            }
            let mean = sum / count;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for v in &x.data[off..off + hw] {
                    let d = *v as f64 - mean;
                    sq += d * d;
                }
            }
            let var = sq / count;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = inv as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = ((x.data[j] as f64 - mean) * inv) as f32;
                    x_hat[j] = xh;
                    out.data[j] = xh * g + b;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean as f32;
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased as f32;
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            shape: x.shape,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        if grad.shape != cache.shape {
            return Err(Error::shape(format!("{:?}", cache.shape), format!("{:?}", grad.shape)));
        }
        let [n, c, h, w] = cache.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    sum_dy += grad.data[j] as f64;
                    sum_dy_xh += (grad.data[j] * cache.x_hat[j]) as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xh as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let g = self.gamma.value[ch] as f64;
            let k = g * cache.inv_std[ch] as f64 / m;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let v = m * grad.data[j] as f64 - sum_dy - cache.x_hat[j] as f64 * sum_dy_xh;
                    dx.data[j] = (k * v) as f32;
                }
            }
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.gamma"), Slot::Param(&mut self.gamma));
        f(&format!("{prefix}.beta"), Slot::Param(&mut self.beta));
        f(&format!("{prefix}.running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&format!("{prefix}.running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        input
    }

    fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// `min(max(x, 0), 6)`
    Relu6,
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    mask: Option<Vec<bool>>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, mask: None }
    }
}

impl Module for Activation {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let hi = match self.kind {
            ActivationKind::Relu => f32::INFINITY,
            ActivationKind::Relu6 => 6.0,
        };
        let data: Vec<f32> = x.data.iter().map(|v| v.clamp(0.0, hi)).collect();
        if train {
            self.mask = Some(x.data.iter().map(|v| *v > 0.0 && *v < hi).collect());
        }
        Ok(Tensor {
            shape: x.shape,
            data,
        })
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("activation"))?;
        if mask.len() != grad.data.len() {
            return Err(Error::shape(mask.len(), grad.data.len()));
        }
        let data = grad
            .data
            .iter()
            .zip(&mask)
            .map(|(g, m)| if *m { *g } else { 0.0 })
            .collect();
        Ok(Tensor {
            shape: grad.shape,
            data,
        })
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot<'_>)) {}

    fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        input
    }

    fn param_count(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Activation(Activation),
}

impl Layer {
    fn as_module(&mut self) -> &mut dyn Module {
        match self {
            Layer::Conv(l) => l,
            Layer::BatchNorm(l) => l,
            Layer::Activation(l) => l,
        }
    }

    fn as_module_ref(&self) -> &dyn Module {
        match self {
            Layer::Conv(l) => l,
            Layer::BatchNorm(l) => l,
            Layer::Activation(l) => l,
        }
    }
}

/// A chain of layers, optionally wrapped in an identity shortcut.
#[derive(Debug, Clone)]
pub struct Block {
    pub layers: Vec<Layer>,
    pub residual: bool,
}

impl Block {
    pub fn new(layers: Vec<Layer>, residual: bool) -> Self {
        Self { layers, residual }
    }

    /// conv -> batch norm -> activation.
    pub fn conv_bn_act<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Option<ActivationKind>,
        rng: &mut R,
    ) -> Result<Vec<Layer>> {
        let mut v = vec![
            Layer::Conv(Conv2d::new(in_c, out_c, kernel, stride, kernel / 2, groups, rng)?),
            Layer::BatchNorm(BatchNorm2d::new(out_c)),
        ];
        if let Some(a) = act {
            v.push(Layer::Activation(Activation::new(a)));
        }
        Ok(v)
    }
}

impl Module for Block {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut cur: Option<Tensor> = None;
        for l in &mut self.layers {
            let next = l.as_module().forward(cur.as_ref().unwrap_or(x), train)?;
            cur = Some(next);
        }
        let mut out = cur.unwrap_or_else(|| x.clone());
        if self.residual {
            if out.shape != x.shape {
                return Err(Error::shape(format!("{:?}", x.shape), format!("{:?}", out.shape)));
            }
            out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.as_module().backward(&g)?;
        }
        if self.residual {
            g.data.iter_mut().zip(&grad.data).for_each(|(a, b)| *a += b);
        }
        Ok(g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.as_module().visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        self.layers
            .iter()
            .fold(input, |s, l| l.as_module_ref().output_shape(s))
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.as_module_ref().param_count()).sum()
    }
}

/// Fully connected layer on `[batch, features]` row-major matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Param,
    pub bias: Param,
    input: Option<(usize, Vec<f32>)>,
}

impl Linear {
    /// Uniform `+-1/sqrt(in)` weights and zero bias.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = (0..in_features * out_features).map(|_| dist.sample(rng)).collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(value),
            bias: Param::new(vec![0.0; out_features]),
            input: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&mut self, x: &[f32], batch: usize, train: bool) -> Result<Vec<f32>> {
        if x.len() != batch * self.in_features {
            return Err(Error::shape(batch * self.in_features, x.len()));
        }
        let (i, o) = (self.in_features, self.out_features);
        let mut out = vec![0.0f32; batch * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(&self.bias.value);
        }
        // out[b x o] += x[b x i] * W^T[i x o]
        gemm(batch, i, o, x, (i, 1), &self.weight.value, (1, i), 1.0, &mut out);
        if train {
            self.input = Some((batch, x.to_vec()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &[f32]) -> Result<Vec<f32>> {
        let (batch, x) = self.input.take().ok_or_else(|| missing_cache("linear"))?;
        let (i, o) = (self.in_features, self.out_features);
        if grad.len() != batch * o {
            return Err(Error::shape(batch * o, grad.len()));
        }
        for row in grad.chunks(o) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        // dW[o x i] += dY^T[o x b] * x[b x i]
        gemm(o, batch, i, grad, (1, o), &x, (i, 1), 1.0, &mut self.weight.grad);
        let mut dx = vec![0.0f32; batch * i];
        gemm(batch, o, i, grad, (o, 1), &self.weight.value, (i, 1), 0.0, &mut dx);
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        f(&format!("{prefix}.bias"), Slot::Param(&mut self.bias));
    }
}

/// Spatial mean of every channel: `[N, C, H, W] -> [N, C]`.
pub fn global_average_pool(x: &Tensor) -> Vec<f32> {
    let [_, _, h, w] = x.shape;
    let hw = h * w;
    x.data
        .chunks(hw)
        .map(|plane| (plane.iter().map(|v| *v as f64).sum::<f64>() / hw as f64) as f32)
        .collect()
}

pub fn global_average_pool_backward(grad: &[f32], shape: [usize; 4]) -> Tensor {
    let hw = shape[2] * shape[3];
    let scale = 1.0 / hw as f32;
    let mut data = Vec::with_capacity(grad.len() * hw);
    for g in grad {
        data.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor { shape, data }
}

/// Stochastic gradient descent with classical momentum:
/// `v = momentum * v + (g + wd * p); p -= lr * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn step(&self, p: &mut Param, lr: f32) {
        for ((v, g), x) in p.velocity.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
            let d = *g + self.weight_decay * *x;
            *v = self.momentum * *v + d;
            *x -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar objective sum(out * r) for a fixed random r, and its input
    /// gradient by central differences in f64-accumulated f32 arithmetic.
    fn check_module<M: Module + Clone>(m: &M, x: &Tensor, tol: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut m0 = m.clone();
        let out = m0.forward(x, true).unwrap();
        let r: Vec<f32> = (0..out.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gx = m0
            .backward(&Tensor {
                shape: out.shape,
                data: r.clone(),
            })
            .unwrap();
        let obj = |xx: &Tensor| -> f64 {
            let mut mm = m.clone();
            let o = mm.forward(xx, true).unwrap();
            o.data.iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for idx in (0..x.data.len()).step_by((x.data.len() / 23).max(1)) {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = ((obj(&xp) - obj(&xm)) / (2.0 * eps as f64)) as f32;
            let an = gx.data[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "idx {idx}: fd {fd} analytic {an}"
            );
        }
    }

    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let [n, ci, h, w] = x.shape;
        let k = c.kernel;
        let (oh, ow) = c.out_hw(h, w);
        let mut out = Tensor::zeros([n, c.out_channels, oh, ow]);
        let cpg = ci / c.groups;
        let opg = c.out_channels / c.groups;
        for b in 0..n {
            for o in 0..c.out_channels {
                let g = o / opg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for cc in 0..cpg {
                            let ic = g * cpg + cc;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = c.weight.value[((o * cpg + cc) * k + ky) * k + kx];
                                    let xv = x.data[((b * ci + ic) * h + iy as usize) * w + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        out.data[((b * c.out_channels + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ci, co, k, s, g) in [(3, 5, 3, 2, 1), (4, 4, 3, 1, 4), (2, 6, 1, 1, 1), (6, 6, 3, 2, 6)] {
            let mut conv = Conv2d::new(ci, co, k, s, k / 2, g, &mut rng).unwrap();
            let x = rand_tensor([2, ci, 7, 9], &mut rng);
            let got = conv.forward(&x, false).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape, want.shape);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_output_shape_stride_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(1, 16, 3, 2, 1, 1, &mut rng).unwrap();
        assert_eq!(conv.output_shape([4, 1, 120, 192]), [4, 16, 60, 96]);
        assert_eq!(conv.output_shape([4, 1, 15, 24]), [4, 16, 8, 12]);
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense = Conv2d::new(3, 4, 3, 2, 1, 1, &mut rng).unwrap();
        check_module(&dense, &rand_tensor([2, 3, 6, 5], &mut rng), 2e-3);
        let dw = Conv2d::new(3, 3, 3, 1, 1, 3, &mut rng).unwrap();
        check_module(&dw, &rand_tensor([2, 3, 5, 5], &mut rng), 2e-3);
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for groups in [1, 3] {
            let conv = Conv2d::new(3, 3, 3, 2, 1, groups, &mut rng).unwrap();
            let x = rand_tensor([2, 3, 6, 6], &mut rng);
            let mut c0 = conv.clone();
            let out = c0.forward(&x, true).unwrap();
            let r: Vec<f32> = (0..out.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            c0.backward(&Tensor { shape: out.shape, data: r.clone() }).unwrap();
            let eps = 1e-2;
            for idx in 0..conv.weight.len() {
                let obj = |delta: f32| -> f64 {
                    let mut c = conv.clone();
                    c.weight.value[idx] += delta;
                    let o = c.forward(&x, false).unwrap();
                    o.data.iter().zip(&r).map(|(a, b)| (*a * *b) as f64).sum()
                };
                let fd = ((obj(eps) - obj(-eps)) / (2.0 * eps as f64)) as f32;
                let an = c0.weight.grad[idx];
                assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn batchnorm_gradient_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor([4, 3, 3, 3], &mut rng);
        check_module(&bn, &x, 5e-3);

        let mut b2 = BatchNorm2d::new(3);
        let out = b2.forward(&x, true).unwrap();
        for ch in 0..3 {
            let vals: Vec<f32> = (0..4)
                .flat_map(|i| out.data[(i * 3 + ch) * 9..(i * 3 + ch + 1) * 9].to_vec())
                .collect();
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
        }
        assert!(b2.running_mean.iter().any(|m| *m != 0.0));
    }

    #[test]
    fn activation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = rand_tensor([2, 2, 4, 4], &mut rng);
        // keep away from the kink so finite differences are valid
        x.data.iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
        check_module(&Activation::new(ActivationKind::Relu), &x, 1e-3);
        let mut big = x.clone();
        big.data.iter_mut().for_each(|v| *v *= 10.0);
        let mut r6 = Activation::new(ActivationKind::Relu6);
        let out = r6.forward(&big, false).unwrap();
        assert!(out.data.iter().all(|v| (0.0..=6.0).contains(v)));
    }

    #[test]
    fn residual_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layers = Block::conv_bn_act(3, 3, 3, 1, 1, Some(ActivationKind::Relu6), &mut rng).unwrap();
        let block = Block::new(layers, true);
        check_module(&block, &rand_tensor([3, 3, 4, 4], &mut rng), 5e-3);
    }

    #[test]
    fn linear_forward_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lin = Linear::new(5, 3, &mut rng);
        lin.bias.value = vec![0.1, 0.2, 0.3];
        let x: Vec<f32> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = lin.forward(&x, 2, true).unwrap();
        for b in 0..2 {
            for o in 0..3 {
                let want: f32 = lin.bias.value[o]
                    + (0..5).map(|i| lin.weight.value[o * 5 + i] * x[b * 5 + i]).sum::<f32>();
                assert!((y[b * 3 + o] - want).abs() < 1e-6);
            }
        }
        let g = vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let dx = lin.backward(&g).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                let want: f32 = (0..3).map(|o| g[b * 3 + o] * lin.weight.value[o * 5 + i]).sum();
                assert!((dx[b * 5 + i] - want).abs() < 1e-6);
            }
        }
        for o in 0..3 {
            for i in 0..5 {
                let want: f32 = (0..2).map(|b| g[b * 3 + o] * x[b * 5 + i]).sum();
                assert!((lin.weight.grad[o * 5 + i] - want).abs() < 1e-6);
            }
        }
        assert_eq!(lin.bias.grad, vec![1.5, 0.5, -0.5]);
    }

    #[test]
    fn pooling_round_trip() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap();
        assert_eq!(global_average_pool(&x), vec![2.0, 1.0]);
        let g = global_average_pool_backward(&[2.0, 4.0], x.shape);
        assert_eq!(g.data, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = Param::new(vec![1.0]);
        p.grad = vec![0.5];
        let opt = Sgd { momentum: 0.9, weight_decay: 0.0 };
        opt.step(&mut p, 0.1);
        assert!((p.value[0] - 0.95).abs() < 1e-7);
        opt.step(&mut p, 0.1);
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((p.value[0] - (0.95 - 0.095)).abs() < 1e-7);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, 1, &mut rng).unwrap();
        assert!(conv.backward(&Tensor::zeros([1, 1, 3, 3])).is_err());
    }
}
