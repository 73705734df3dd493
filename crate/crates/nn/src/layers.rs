//! Layers with cached forward state and hand-written backward passes.
//!
//! Every layer offers two forward paths: `forward` records whatever the
//! backward pass needs (and, for batch norm, uses batch statistics when
//! training), while `infer` takes `&self` so frozen models can be shared
//! between threads.

use rand::Rng;

use crate::tensor::{gemm, Tensor};
use crate::{NnError, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(NnError::Shape(format!("{what} expects a rank-{rank} input, got {:?}", x.shape())));
    }
    Ok(())
}

fn missing_cache(what: &str) -> NnError {
    NnError::State(format!("{what}: backward called without a training forward"))
}

// ---------------------------------------------------------------- conv2d

/// 2-D convolution over NCHW input, square kernel, zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialization.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = Tensor::randn(&[out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            padding,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        expect_rank(x, 4, "conv2d")?;
        if x.dim(1) != self.in_channels {
            return Err(NnError::Shape(format!("conv2d expects {} channels, got {}", self.in_channels, x.dim(1))));
        }
        if x.dim(2) + 2 * self.padding < self.kernel || x.dim(3) + 2 * self.padding < self.kernel {
            return Err(NnError::Shape(format!(
                "conv2d kernel {} larger than padded input {:?}",
                self.kernel,
                x.shape()
            )));
        }
        Ok((x.dim(0), x.dim(2), x.dim(3)))
    }

    fn im2col(&self, img: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.kernel;
        let hw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((c * k + ki) * k + kj) * hw..][..hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize, img: &mut [f64]) {
        let k = self.kernel;
        let hw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((c * k + ki) * k + kj) * hw..][..hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check(x)?;
        let (oh, ow) = self.output_size(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![0.0; ckk * oh * ow];
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * oh * ow;
        for i in 0..n {
            self.im2col(&x.data()[i * in_stride..(i + 1) * in_stride], h, w, oh, ow, &mut col);
            let dst = &mut out.data_mut()[i * out_stride..(i + 1) * out_stride];
            for (f, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.fill(self.bias.value.data()[f]);
            }
            gemm(self.out_channels, ckk, oh * ow, self.weight.value.data(), false, &col, false, 1.0, dst);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (oh, ow) = self.output_size(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![0.0; ckk * oh * ow];
        let mut dcol = vec![0.0; ckk * oh * ow];
        let mut dx = Tensor::zeros(x.shape());
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * oh * ow;
        for i in 0..n {
            let g = &grad.data()[i * out_stride..(i + 1) * out_stride];
            self.im2col(&x.data()[i * in_stride..(i + 1) * in_stride], h, w, oh, ow, &mut col);
            gemm(self.out_channels, oh * ow, ckk, g, false, &col, true, 1.0, self.weight.grad.data_mut());
            for (f, chunk) in g.chunks(oh * ow).enumerate() {
                self.bias.grad.data_mut()[f] += chunk.iter().sum::<f64>();
            }
            gemm(ckk, self.out_channels, oh * ow, self.weight.value.data(), true, g, false, 0.0, &mut dcol);
            self.col2im(&dcol, h, w, oh, ow, &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride]);
        }
        Ok(dx)
    }
}

// ------------------------------------------------------------ batch norm

/// Per-channel batch normalization over NCHW input.
///
/// `momentum` follows the Keras convention: the running statistics keep
/// `momentum` of their old value on every training step.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            channels,
            momentum,
            eps: 1e-3,
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        expect_rank(x, 4, "batch_norm")?;
        if x.dim(1) != self.channels {
            return Err(NnError::Shape(format!("batch_norm expects {} channels, got {}", self.channels, x.dim(1))));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
                let (g, b, m) = (self.gamma.value.data()[ch], self.beta.value.data()[ch], self.running_mean.data()[ch]);
                for v in &mut y.data_mut()[(i * c + ch) * hw..][..hw] {
                    *v = g * (*v - m) * inv + b;
                }
            }
        }
        Ok(y)
    }

    /// Training-mode forward: normalizes with batch statistics and updates
    /// the running estimates.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let count = (n * hw) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += x.data()[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..n {
                sq += x.data()[(i * c + ch) * hw..][..hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let h = (x.data()[j] - mean) * inv;
                    xhat.data_mut()[j] = h;
                    y.data_mut()[j] = g * h + b;
                }
            }
            let m = self.momentum;
            self.running_mean.data_mut()[ch] = m * self.running_mean.data()[ch] + (1.0 - m) * mean;
            self.running_var.data_mut()[ch] = m * self.running_var.data()[ch] + (1.0 - m) * var;
        }
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (xhat, inv_std) = self.cache.take().ok_or_else(|| missing_cache("batch_norm"))?;
        let (n, c, hw) = (grad.dim(0), grad.dim(1), grad.dim(2) * grad.dim(3));
        let count = (n * hw) as f64;
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    sg += grad.data()[j];
                    sgx += grad.data()[j] * xhat.data()[j];
                }
            }
            self.gamma.grad.data_mut()[ch] += sgx;
            self.beta.grad.data_mut()[ch] += sg;
            let scale = self.gamma.value.data()[ch] * inv_std[ch] / count;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dx.data_mut()[j] = scale * (count * grad.data()[j] - sg - xhat.data()[j] * sgx);
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------- activations

#[derive(Clone, Debug, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

impl Relu {
    pub fn infer(&self, x: &Tensor) -> Tensor {
        x.map(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("relu"))?;
        let mut dx = grad.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu {
    pub slope: f64,
    input: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, input: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let s = self.slope;
        x.map(|v| if v > 0.0 { v } else { s * v })
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("leaky_relu"))?;
        let mut dx = grad.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= 0.0 {
                *d *= self.slope;
            }
        }
        Ok(dx)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

impl Sigmoid {
    pub fn infer(&self, x: &Tensor) -> Tensor {
        x.map(sigmoid)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.output.take().ok_or_else(|| missing_cache("sigmoid"))?;
        let mut dx = grad.clone();
        for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= s * (1.0 - s);
        }
        Ok(dx)
    }
}

// -------------------------------------------------------------- pooling

/// 2x2 max pooling with stride 2. Odd edges keep a partial window, so the
/// output is `ceil(h/2) x ceil(w/2)`.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    fn run(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        expect_rank(x, 4, "max_pool")?;
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut idx = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            let v = src[iy * w + ix];
                            if v > best {
                                best = v;
                                at = iy * w + ix;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = best;
                    idx[o] = p * h * w + at;
                }
            }
        }
        Ok((out, idx))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::run(x)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, idx) = Self::run(x)?;
        self.argmax = Some((idx, x.shape().to_vec()));
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (idx, shape) = self.argmax.take().ok_or_else(|| missing_cache("max_pool"))?;
        let mut dx = Tensor::zeros(&shape);
        for (g, &i) in grad.data().iter().zip(&idx) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }
}

/// Nearest-neighbour resize to a fixed spatial size. With an exact factor
/// of two this is the usual 2x up-sampling layer.
#[derive(Clone, Debug)]
pub struct ResizeNearest {
    pub out_h: usize,
    pub out_w: usize,
    input_shape: Option<Vec<usize>>,
}

impl ResizeNearest {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self { out_h, out_w, input_shape: None }
    }

    fn source(&self, h: usize, w: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(self.out_h * self.out_w);
        for oy in 0..self.out_h {
            let iy = oy * h / self.out_h;
            for ox in 0..self.out_w {
                map.push(iy * w + ox * w / self.out_w);
            }
        }
        map
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "resize")?;
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let map = self.source(h, w);
        let plane = self.out_h * self.out_w;
        let mut out = Tensor::zeros(&[n, c, self.out_h, self.out_w]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (d, &s) in out.data_mut()[p * plane..(p + 1) * plane].iter_mut().zip(&map) {
                *d = src[s];
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("resize"))?;
        let (h, w) = (shape[2], shape[3]);
        let map = self.source(h, w);
        let plane = self.out_h * self.out_w;
        let mut dx = Tensor::zeros(&shape);
        for p in 0..shape[0] * shape[1] {
            let g = &grad.data()[p * plane..(p + 1) * plane];
            let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for (&gv, &s) in g.iter().zip(&map) {
                dst[s] += gv;
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------- dense

/// Fully connected layer on `(batch, features)` input.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    /// Glorot-uniform initialization.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_features + out_features) as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::new(Tensor::uniform(&[out_features, in_features], limit, rng)),
            bias: Param::new(Tensor::zeros(&[out_features])),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "dense")?;
        if x.dim(1) != self.in_features {
            return Err(NnError::Shape(format!("dense expects {} features, got {}", self.in_features, x.dim(1))));
        }
        let n = x.dim(0);
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("dense"))?;
        let n = x.dim(0);
        gemm(
            self.out_features,
            n,
            self.in_features,
            grad.data(),
            true,
            x.data(),
            false,
            1.0,
            self.weight.grad.data_mut(),
        );
        for row in grad.data().chunks(self.out_features) {
            for (b, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        gemm(
            n,
            self.out_features,
            self.in_features,
            grad.data(),
            false,
            self.weight.value.data(),
            false,
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }
}

/// Reshapes everything after the batch axis.
#[derive(Clone, Debug)]
pub struct Reshape {
    pub target: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: &[usize]) -> Self {
        Self { target: target.to_vec(), input_shape: None }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![x.dim(0)];
        shape.extend_from_slice(&self.target);
        x.clone().reshape(&shape)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("reshape"))?;
        grad.clone().reshape(&shape)
    }
}

// ------------------------------------------- minibatch discrimination

/// Batch-level closeness features.
///
/// Projects each row through `kernel` (`features x (kernels*dims)`), then for
/// every kernel `b` computes `o[i,b] = sum_{j != i} exp(-|M[i,b,:] - M[j,b,:]|_1)`.
/// Returns `(o, M)`.
pub fn minibatch_features(x: &Tensor, kernel: &Tensor, kernels: usize, dims: usize) -> Result<(Tensor, Tensor)> {
    expect_rank(x, 2, "minibatch_features")?;
    let (n, f) = (x.dim(0), x.dim(1));
    if n == 0 {
        return Err(NnError::Shape("minibatch features need a nonempty batch".into()));
    }
    if kernel.shape() != [f, kernels * dims] {
        return Err(NnError::Shape(format!(
            "kernel tensor {:?} does not match {f} x {kernels} x {dims}",
            kernel.shape()
        )));
    }
    let bc = kernels * dims;
    let mut m = Tensor::zeros(&[n, bc]);
    gemm(n, f, bc, x.data(), false, kernel.data(), false, 0.0, m.data_mut());
    let mut o = Tensor::zeros(&[n, kernels]);
    let md = m.data();
    for i in 0..n {
        for j in i + 1..n {
            for b in 0..kernels {
                let mi = &md[i * bc + b * dims..][..dims];
                let mj = &md[j * bc + b * dims..][..dims];
                let dist: f64 = mi.iter().zip(mj).map(|(a, c)| (a - c).abs()).sum();
                let e = (-dist).exp();
                o.data_mut()[i * kernels + b] += e;
                o.data_mut()[j * kernels + b] += e;
            }
        }
    }
    Ok((o, m))
}

/// Appends minibatch closeness features to its input: `(n, f) -> (n, f + B)`.
#[derive(Clone, Debug)]
pub struct MinibatchDiscrimination {
    pub kernels: usize,
    pub dims: usize,
    pub tensor: Param,
    cache: Option<(Tensor, Tensor)>,
}

impl MinibatchDiscrimination {
    /// Kernel tensor drawn from `N(0, 1/f)`.
    pub fn new<R: Rng + ?Sized>(features: usize, kernels: usize, dims: usize, rng: &mut R) -> Self {
        let std = 1.0 / (features as f64).sqrt();
        Self { kernels, dims, tensor: Param::new(Tensor::randn(&[features, kernels * dims], std, rng)), cache: None }
    }

    pub fn in_features(&self) -> usize {
        self.tensor.value.dim(0)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (o, _) = minibatch_features(x, &self.tensor.value, self.kernels, self.dims)?;
        Tensor::concat_cols(x, &o)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (o, m) = minibatch_features(x, &self.tensor.value, self.kernels, self.dims)?;
        let y = Tensor::concat_cols(x, &o)?;
        self.cache = Some((x.clone(), m));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, m) = self.cache.take().ok_or_else(|| missing_cache("minibatch_discrimination"))?;
        let (n, f) = (x.dim(0), x.dim(1));
        let (nb, nc) = (self.kernels, self.dims);
        let bc = nb * nc;
        let width = f + nb;
        let g = grad.data();
        // Each pair term e = exp(-|M_i - M_j|_1) appears in both o[i,b] and o[j,b]:
        // dL/dM_i = -(g_i + g_j) * e * sign(M_i - M_j), dL/dM_j is its negation.
        let mut dm = Tensor::zeros(&[n, bc]);
        let md = m.data();
        for i in 0..n {
            for j in i + 1..n {
                for b in 0..nb {
                    let mi = &md[i * bc + b * nc..][..nc];
                    let mj = &md[j * bc + b * nc..][..nc];
                    let dist: f64 = mi.iter().zip(mj).map(|(a, c)| (a - c).abs()).sum();
                    let e = (-dist).exp();
                    let gi = g[i * width + f + b];
                    let gj = g[j * width + f + b];
                    for c in 0..nc {
                        let s = if mi[c] == mj[c] { 0.0 } else { (mi[c] - mj[c]).signum() };
                        let v = -e * s * (gi + gj);
                        dm.data_mut()[i * bc + b * nc + c] += v;
                        dm.data_mut()[j * bc + b * nc + c] -= v;
                    }
                }
            }
        }
        gemm(f, n, bc, x.data(), true, dm.data(), false, 1.0, self.tensor.grad.data_mut());
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(n, bc, f, dm.data(), false, self.tensor.value.data(), true, 0.0, dx.data_mut());
        for i in 0..n {
            for k in 0..f {
                dx.data_mut()[i * f + k] += g[i * width + k];
            }
        }
        Ok(dx)
    }
}
