use rand::Rng;

use super::{Param, WeightDraw, WeightNoise, Weights};
use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: Weights,
    pub bias: Param,
    pub inputs: usize,
    pub outputs: usize,
}

pub struct LinearCache {
    input: Tensor,
    draw: WeightDraw,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weights: Weights::Point(Param::he(inputs * outputs, inputs, rng)),
            bias: Param::zeros(outputs),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, x: &Tensor, noise: WeightNoise, rng: &mut impl Rng) -> Result<(Tensor, LinearCache)> {
        let n = x.n();
        if x.c() * x.spatial() != self.inputs {
            return Err(Error::shape(format!(
                "linear layer expects {} features, got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let draw = self.weights.draw(noise, rng);
        let mut out = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(n, self.inputs, self.outputs, 1.0, x.data(), false, &draw.values, true, 1.0, &mut out);
        Ok((
            Tensor::matrix(n, self.outputs, out)?,
            LinearCache { input: x.clone(), draw },
        ))
    }

    pub fn backward(&mut self, cache: LinearCache, dy: &Tensor) -> Tensor {
        let n = dy.n();
        let mut dw = vec![0.0; self.inputs * self.outputs];
        gemm(self.outputs, n, self.inputs, 1.0, dy.data(), true, cache.input.data(), false, 0.0, &mut dw);
        self.weights.accumulate(&dw, &cache.draw);
        for row in dy.data().chunks(self.outputs) {
            super::add_into(&mut self.bias.grad, row);
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(n, self.outputs, self.inputs, 1.0, dy.data(), false, &cache.draw.values, false, 0.0, &mut dx);
        Tensor::from_vec(cache.input.shape(), dx).expect("input shape")
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.weights.visit_params(f);
        f(&mut self.bias);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        self.weights.visit_buffers(prefix, f);
        f(&format!("{prefix}.bias"), &mut self.bias.value);
    }
}

pub struct ConvCache {
    cols: Vec<f32>,
    geom: ConvGeometry,
    input_shape: [usize; 4],
    draw: WeightDraw,
}

/// Strided 2-D convolution, weights `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weights: Weights,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weights: Weights::Point(Param::he(out_channels * fan_in, fan_in, rng)),
            bias: Param::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        if x.c() != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        let span_h = x.h() + 2 * self.pad;
        let span_w = x.w() + 2 * self.pad;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::shape(format!("input {:?} smaller than kernel", x.shape())));
        }
        Ok(ConvGeometry {
            channels: self.in_channels,
            in_h: x.h(),
            in_w: x.w(),
            out_h: (span_h - self.kernel) / self.stride + 1,
            out_w: (span_w - self.kernel) / self.stride + 1,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        })
    }

    pub fn forward(&self, x: &Tensor, noise: WeightNoise, rng: &mut impl Rng) -> Result<(Tensor, ConvCache)> {
        let g = self.geometry(x)?;
        let (n, p, rows) = (x.n(), g.positions(), g.rows());
        let ld = n * p;
        let mut cols = vec![0.0; rows * ld];
        for i in 0..n {
            im2col(&g, x.sample(i), &mut cols, ld, i * p);
        }
        let draw = self.weights.draw(noise, rng);
        let mut out_mat = vec![0.0; self.out_channels * ld];
        gemm(self.out_channels, rows, ld, 1.0, &draw.values, false, &cols, false, 0.0, &mut out_mat);
        let mut out = vec![0.0; self.out_channels * ld];
        for i in 0..n {
            for c in 0..self.out_channels {
                let b = self.bias.value[c];
                let src = &out_mat[c * ld + i * p..c * ld + (i + 1) * p];
                let dst = &mut out[(i * self.out_channels + c) * p..(i * self.out_channels + c + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let y = Tensor::from_vec([n, self.out_channels, g.out_h, g.out_w], out)?;
        Ok((
            y,
            ConvCache {
                cols,
                geom: g,
                input_shape: x.shape(),
                draw,
            },
        ))
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Tensor) -> Tensor {
        let g = cache.geom;
        let (n, p, rows) = (dy.n(), g.positions(), g.rows());
        let ld = n * p;
        let mut dy_mat = vec![0.0; self.out_channels * ld];
        for i in 0..n {
            for c in 0..self.out_channels {
                let src = &dy.data()[(i * self.out_channels + c) * p..(i * self.out_channels + c + 1) * p];
                dy_mat[c * ld + i * p..c * ld + (i + 1) * p].copy_from_slice(src);
                self.bias.grad[c] += src.iter().sum::<f32>();
            }
        }
        let mut dw = vec![0.0; self.out_channels * rows];
        gemm(self.out_channels, ld, rows, 1.0, &dy_mat, false, &cache.cols, true, 0.0, &mut dw);
        self.weights.accumulate(&dw, &cache.draw);
        let mut dcols = cache.cols;
        gemm(rows, self.out_channels, ld, 1.0, &cache.draw.values, true, &dy_mat, false, 0.0, &mut dcols);
        let mut dx = Tensor::zeros(cache.input_shape);
        let per = dx.len() / n;
        for i in 0..n {
            col2im(&g, &dcols, ld, i * p, &mut dx.data_mut()[i * per..(i + 1) * per]);
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.weights.visit_params(f);
        f(&mut self.bias);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        self.weights.visit_buffers(prefix, f);
        f(&format!("{prefix}.bias"), &mut self.bias.value);
    }
}

/// Transposed convolution, weights `[in, out, k, k]`. Output size is
/// `(h - 1) * stride - 2 * pad + kernel + output_pad`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weights: Weights,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            weights: Weights::Point(Param::he(in_channels * out_channels * kernel * kernel, fan_in, rng)),
            bias: Param::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        if x.c() != self.in_channels {
            return Err(Error::shape(format!(
                "transposed conv expects {} channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        let grow = |v: usize| ((v - 1) * self.stride + self.kernel + self.output_pad).checked_sub(2 * self.pad);
        let (Some(out_h), Some(out_w)) = (grow(x.h()), grow(x.w())) else {
            return Err(Error::shape(format!("input {:?} too small", x.shape())));
        };
        // The sweep below is the forward conv over the *output*, whose
        // positions are the input pixels.
        Ok(ConvGeometry {
            channels: self.out_channels,
            in_h: out_h,
            in_w: out_w,
            out_h: x.h(),
            out_w: x.w(),
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        })
    }

    fn channel_major(x: &Tensor) -> Vec<f32> {
        let (n, c, p) = (x.n(), x.c(), x.spatial());
        let mut m = vec![0.0; n * c * p];
        for i in 0..n {
            for ch in 0..c {
                m[ch * n * p + i * p..ch * n * p + (i + 1) * p]
                    .copy_from_slice(&x.data()[(i * c + ch) * p..(i * c + ch + 1) * p]);
            }
        }
        m
    }

    pub fn forward(&self, x: &Tensor, noise: WeightNoise, rng: &mut impl Rng) -> Result<(Tensor, ConvCache)> {
        let g = self.geometry(x)?;
        let (n, p, rows) = (x.n(), g.positions(), g.rows());
        let ld = n * p;
        let x_mat = Self::channel_major(x);
        let draw = self.weights.draw(noise, rng);
        let mut cols = vec![0.0; rows * ld];
        gemm(rows, self.in_channels, ld, 1.0, &draw.values, true, &x_mat, false, 0.0, &mut cols);
        let mut y = Tensor::zeros([n, self.out_channels, g.in_h, g.in_w]);
        let per = y.len() / n;
        let plane = g.in_h * g.in_w;
        for i in 0..n {
            let out = &mut y.data_mut()[i * per..(i + 1) * per];
            col2im(&g, &cols, ld, i * p, out);
            for c in 0..self.out_channels {
                let b = self.bias.value[c];
                out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
        }
        Ok((
            y,
            ConvCache {
                cols: x_mat,
                geom: g,
                input_shape: x.shape(),
                draw,
            },
        ))
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Tensor) -> Tensor {
        let g = cache.geom;
        let (n, p, rows) = (dy.n(), g.positions(), g.rows());
        let ld = n * p;
        let plane = dy.spatial();
        for i in 0..n {
            for c in 0..self.out_channels {
                let s = &dy.data()[(i * self.out_channels + c) * plane..(i * self.out_channels + c + 1) * plane];
                self.bias.grad[c] += s.iter().sum::<f32>();
            }
        }
        let mut dcols = vec![0.0; rows * ld];
        for i in 0..n {
            im2col(&g, dy.sample(i), &mut dcols, ld, i * p);
        }
        let x_mat = cache.cols;
        let mut dw = vec![0.0; self.in_channels * rows];
        gemm(self.in_channels, ld, rows, 1.0, &x_mat, false, &dcols, true, 0.0, &mut dw);
        self.weights.accumulate(&dw, &cache.draw);
        let mut dx_mat = vec![0.0; self.in_channels * ld];
        gemm(self.in_channels, rows, ld, 1.0, &cache.draw.values, false, &dcols, false, 0.0, &mut dx_mat);
        let mut dx = Tensor::zeros(cache.input_shape);
        for i in 0..n {
            for ch in 0..self.in_channels {
                dx.data_mut()[(i * self.in_channels + ch) * p..(i * self.in_channels + ch + 1) * p]
                    .copy_from_slice(&dx_mat[ch * ld + i * p..ch * ld + (i + 1) * p]);
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.weights.visit_params(f);
        f(&mut self.bias);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        self.weights.visit_buffers(prefix, f);
        f(&format!("{prefix}.bias"), &mut self.bias.value);
    }
}

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
    batch_stats: bool,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalize with batch statistics (`batch_stats`) or the running ones.
    pub fn forward(&self, x: &Tensor, batch_stats: bool) -> Result<(Tensor, BnCache)> {
        let (n, c, p) = (x.n(), x.c(), x.spatial());
        if c != self.gamma.len() {
            return Err(Error::shape(format!("batch norm expects {} channels, got {c}", self.gamma.len())));
        }
        let count = (n * p) as f64;
        let mut mean = self.running_mean.clone();
        let mut var = self.running_var.clone();
        if batch_stats {
            for ch in 0..c {
                let (mut s, mut sq) = (0.0f64, 0.0f64);
                for i in 0..n {
                    for &v in &x.data()[(i * c + ch) * p..(i * c + ch + 1) * p] {
                        s += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let m = s / count;
                mean[ch] = m as f32;
                var[ch] = (sq / count - m * m).max(0.0) as f32;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                let (m, s, gm, bt) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for ((xh, yv), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x.data()[r]) {
                    *xh = (v - m) * s;
                    *yv = gm * *xh + bt;
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            BnCache {
                xhat,
                inv_std,
                shape: x.shape(),
                batch_stats,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Fold batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        if !cache.batch_stats {
            return;
        }
        let count = (cache.shape[0] * cache.shape[2] * cache.shape[3]) as f32;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * cache.batch_mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: BnCache, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = cache.shape;
        let p = h * w;
        let count = (n * p) as f32;
        let mut dx = vec![0.0; dy.len()];
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f32, 0.0f32);
            for i in 0..n {
                let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                for (&d, &xh) in dy.data()[r.clone()].iter().zip(&cache.xhat[r]) {
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let r = (i * c + ch) * p..(i * c + ch + 1) * p;
                for ((o, &d), &xh) in dx[r.clone()].iter_mut().zip(&dy.data()[r.clone()]).zip(&cache.xhat[r]) {
                    *o = if cache.batch_stats {
                        scale * (d - sum_dy / count - xh * sum_dy_xhat / count)
                    } else {
                        scale * d
                    };
                }
            }
        }
        Tensor::from_vec(cache.shape, dx).expect("bn shape")
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma.value);
        f(&format!("{prefix}.beta"), &mut self.beta.value);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}
