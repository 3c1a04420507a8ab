use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Mode, Module, Param};
use crate::rng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// 2-D convolution without bias (every conv here feeds a batch norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_ch, in_ch, kernel, kernel]`
    pub weight: Param,
}

#[derive(Debug, Clone)]
pub struct ConvTape {
    input: Tensor,
}

impl Conv2d {
    /// He-normal initialization.
    pub fn new<R: RngCore>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = libm::sqrt(2.0 / fan_in);
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| std * rng::normal(rng))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, img: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let hw_out = oh * ow;
        for c in 0..self.in_ch {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
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

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, img: &mut [f64]) {
        let k = self.kernel;
        let hw_out = oh * ow;
        for c in 0..self.in_ch {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [b, c, h, w] = dims4(x);
        assert_eq!(c, self.in_ch, "conv expects {} input channels", self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[b, self.out_ch, oh, ow]);
        let mut cols = vec![0.0; ckk * oh * ow];
        for i in 0..b {
            self.im2col(x.row(i), h, w, oh, ow, &mut cols);
            gemm_nn(
                self.out_ch,
                ckk,
                oh * ow,
                &self.weight.value,
                &cols,
                out.row_mut(i),
            );
        }
        out
    }

    pub fn forward_taped(&self, x: &Tensor) -> (Tensor, ConvTape) {
        (self.forward(x), ConvTape { input: x.clone() })
    }

    pub fn backward(&mut self, tape: &ConvTape, gout: &Tensor) -> Tensor {
        let x = &tape.input;
        let [b, _, h, w] = dims4(x);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let hw_out = oh * ow;
        let mut gin = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; ckk * hw_out];
        let mut gcols = vec![0.0; ckk * hw_out];
        for i in 0..b {
            self.im2col(x.row(i), h, w, oh, ow, &mut cols);
            let g = gout.row(i);
            gemm_nt(self.out_ch, hw_out, ckk, g, &cols, &mut self.weight.grad);
            gcols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(ckk, self.out_ch, hw_out, &self.weight.value, g, &mut gcols);
            self.col2im(&gcols, h, w, oh, ow, gin.row_mut(i));
        }
        gin
    }

    pub fn spec(&self, h: usize, w: usize) -> LayerSpec {
        let (out_h, out_w) = self.out_hw(h, w);
        LayerSpec::Conv2d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            out_h,
            out_w,
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }
}

/// Batch normalization over every axis except the channel axis (axis 1).
/// Works for `[B, C]` and `[B, C, H, W]` inputs alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnTape {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn layout(&self, x: &Tensor) -> (usize, usize) {
        let shape = x.shape();
        assert!(shape.len() >= 2 && shape[1] == self.channels);
        (shape[0], shape[2..].iter().product())
    }

    fn normalize_with(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let (b, s) = self.layout(x);
        let c = self.channels;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let xd = x.data();
        for i in 0..b {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let (g, be, m, is) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                for j in base..base + s {
                    let n = (xd[j] - m) * is;
                    xhat.data_mut()[j] = n;
                    out.data_mut()[j] = g * n + be;
                }
            }
        }
        (out, xhat)
    }

    fn batch_stats(&mut self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (b, s) = self.layout(x);
        let c = self.channels;
        let n = (b * s) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..b {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (i * c + ch) * s;
                *m += xd[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for i in 0..b {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let m = mean[ch];
                var[ch] += xd[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }
        let inv_std = var.iter().map(|v| 1.0 / libm::sqrt(v + self.eps)).collect();
        (mean, inv_std)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        match mode {
            Mode::Train => {
                let (mean, inv_std) = self.batch_stats(x);
                self.normalize_with(x, &mean, &inv_std).0
            }
            Mode::Eval => {
                let inv_std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|v| 1.0 / libm::sqrt(v + self.eps))
                    .collect();
                self.normalize_with(x, &self.running_mean, &inv_std).0
            }
        }
    }

    pub fn forward_taped(&mut self, x: &Tensor) -> (Tensor, BnTape) {
        let (mean, inv_std) = self.batch_stats(x);
        let (out, xhat) = self.normalize_with(x, &mean, &inv_std);
        (out, BnTape { xhat, inv_std })
    }

    pub fn backward(&mut self, tape: &BnTape, gout: &Tensor) -> Tensor {
        let (b, s) = self.layout(gout);
        let c = self.channels;
        let n = (b * s) as f64;
        let g = gout.data();
        let xh = tape.xhat.data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for i in 0..b {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    sum_g[ch] += g[j];
                    sum_gx[ch] += g[j] * xh[j];
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_gx[ch];
            self.beta.grad[ch] += sum_g[ch];
        }
        let mut gin = Tensor::zeros(gout.shape());
        let gd = gin.data_mut();
        for i in 0..b {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let scale = self.gamma.value[ch] * tape.inv_std[ch] / n;
                for j in base..base + s {
                    gd[j] = scale * (n * g[j] - sum_g[ch] - xh[j] * sum_gx[ch]);
                }
            }
        }
        gin
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&[f64]> {
        vec![&self.running_mean, &self.running_var]
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_out, d_in]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LinearTape {
    input: Tensor,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(d_in)`.
    pub fn new<R: RngCore>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let weight = (0..d_in * d_out)
            .map(|_| rng::uniform_range(rng, -bound, bound))
            .collect();
        let bias = (0..d_out)
            .map(|_| rng::uniform_range(rng, -bound, bound))
            .collect();
        Self {
            d_in,
            d_out,
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.rows();
        assert_eq!(x.row_len(), self.d_in, "linear expects {} features", self.d_in);
        let mut out = Tensor::zeros(&[b, self.d_out]);
        for i in 0..b {
            out.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm_nt(b, self.d_in, self.d_out, x.data(), &self.weight.value, out.data_mut());
        out
    }

    pub fn forward_taped(&self, x: &Tensor) -> (Tensor, LinearTape) {
        (self.forward(x), LinearTape { input: x.clone() })
    }

    pub fn backward(&mut self, tape: &LinearTape, gout: &Tensor) -> Tensor {
        let b = gout.rows();
        let x = &tape.input;
        gemm_tn(self.d_out, b, self.d_in, gout.data(), x.data(), &mut self.weight.grad);
        for i in 0..b {
            for (gb, g) in self.bias.grad.iter_mut().zip(gout.row(i)) {
                *gb += g;
            }
        }
        let mut gin = Tensor::zeros(&[b, self.d_in]);
        gemm_nn(b, self.d_out, self.d_in, gout.data(), &self.weight.value, gin.data_mut());
        gin.reshape(x.shape())
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Linear {
            d_in: self.d_in,
            d_out: self.d_out,
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct Relu;

impl Relu {
    pub fn forward(mut x: Tensor) -> Tensor {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    /// `out` is the forward output; the gradient passes where it is positive.
    pub fn backward(out: &Tensor, mut gout: Tensor) -> Tensor {
        for (g, o) in gout.data_mut().iter_mut().zip(out.data()) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
        gout
    }
}

pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(x: &Tensor) -> Tensor {
        let [b, c, h, w] = dims4(x);
        let s = (h * w) as f64;
        let mut out = Tensor::zeros(&[b, c]);
        for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks_exact(h * w)) {
            *o = plane.iter().sum::<f64>() / s;
        }
        out
    }

    pub fn backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
        let (h, w) = (in_shape[2], in_shape[3]);
        let s = (h * w) as f64;
        let mut gin = Tensor::zeros(in_shape);
        for (plane, g) in gin.data_mut().chunks_exact_mut(h * w).zip(gout.data()) {
            plane.iter_mut().for_each(|v| *v = g / s);
        }
        gin
    }
}

pub(crate) fn dims4(x: &Tensor) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_rng, Stream};

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [b, c, h, w] = dims4(x);
        let (oh, ow) = conv.out_hw(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(&[b, conv.out_ch, oh, ow]);
        for n in 0..b {
            for o in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * c + ci) * k + ky) * k + kx];
                                    acc += wv * x.data()[((n * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((n * conv.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = keyed_rng(3, Stream::Init, &[]);
        for &(stride, padding, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
            let conv = Conv2d::new(2, 3, k, stride, padding, &mut r);
            let x = Tensor::from_vec(&[2, 2, 5, 6], (0..120).map(|_| rng::normal(&mut r)).collect());
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm::new(2);
        let x = Tensor::from_vec(&[4, 2], alloc::vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| y.data()[i * 2 + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_does_not_touch_state() {
        let mut bn = BatchNorm::new(3);
        let before = bn.clone();
        let x = Tensor::from_vec(&[2, 3], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        bn.forward(&x, Mode::Eval);
        assert_eq!(bn, before);
    }
}
