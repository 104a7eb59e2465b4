//! Layers with hand-written forward and backward passes.
//!
//! Every layer's `forward` is `&self` and returns a cache for `backward`.
//! Batch-norm running statistics are committed separately
//! ([`Layer::commit_stats`]) so a training-mode forward can also be used for
//! read-only sensitivity estimation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Dims, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor together with its SGD momentum buffer.
///
/// The momentum buffer travels with the value so that duplication and
/// pruning keep optimizer state aligned with the weights it belongs to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    pub momentum: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            momentum: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }

    /// Keeps contiguous blocks of `block` elements whose flag is set.
    fn retain_blocks(&mut self, block: usize, keep: &[bool]) {
        let filter = |v: &mut Vec<f64>| {
            if v.is_empty() {
                return;
            }
            let mut out = Vec::with_capacity(v.len());
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&v[i * block..(i + 1) * block]);
                }
            }
            *v = out;
        };
        filter(&mut self.value);
        filter(&mut self.momentum);
        filter(&mut self.grad);
    }

    /// For a `[outer][groups][block]` tensor, keeps the flagged middle groups.
    fn retain_inner(&mut self, outer: usize, block: usize, keep: &[bool]) {
        let groups = keep.len();
        let filter = |v: &mut Vec<f64>| {
            if v.is_empty() {
                return;
            }
            let mut out = Vec::with_capacity(v.len());
            for o in 0..outer {
                for (g, &k) in keep.iter().enumerate() {
                    if k {
                        let start = (o * groups + g) * block;
                        out.extend_from_slice(&v[start..start + block]);
                    }
                }
            }
            *v = out;
        };
        filter(&mut self.value);
        filter(&mut self.momentum);
        filter(&mut self.grad);
    }
}

/// Declarative description of one backbone layer. Input widths are inferred
/// from the preceding layer when the backbone is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
    },
    Linear {
        out_features: usize,
    },
    Norm,
    Relu,
    GlobalAvgPool,
    /// Basic residual block: conv-norm-relu-conv-norm plus a shortcut, then relu.
    /// The shortcut is a 1x1 projection when the stride or width changes.
    Residual {
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

/// Builds concrete layers from specs, returning them with the output dims.
pub fn build_layers<R: Rng>(
    specs: &[LayerSpec],
    input: Dims,
    rng: &mut R,
) -> Result<(Vec<Layer>, Dims)> {
    let mut dims = input;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let layer = match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv(Conv2d::new(
                dims.channels,
                out_channels,
                kernel,
                stride,
                padding.unwrap_or(kernel / 2),
                rng,
            )),
            LayerSpec::Linear { out_features } => {
                if dims.spatial() != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: linear layer needs 1x1 input, got {dims} (add global_avg_pool)"
                    )));
                }
                Layer::Linear(Linear::new(dims.channels, out_features, rng))
            }
            LayerSpec::Norm => Layer::Norm(BatchNorm::new(dims.channels)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Residual {
                out_channels,
                stride,
            } => Layer::Residual(ResidualBlock::new(dims.channels, out_channels, stride, rng)),
        };
        dims = layer
            .out_dims(dims)
            .map_err(|e| Error::ShapeMismatch(format!("layer {i}: {e}")))?;
        layers.push(layer);
    }
    Ok((layers, dims))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in norm layers.
    Train,
    /// Running statistics in norm layers.
    Eval,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][k][k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel).max(1);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            padding,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn row_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_dims(&self, d: Dims) -> Result<Dims> {
        if d.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, d.channels
            )));
        }
        let ph = d.height + 2 * self.padding;
        let pw = d.width + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel {} larger than padded input {}x{}",
                self.kernel, ph, pw
            )));
        }
        Ok(Dims::new(
            self.out_channels,
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// `2 · k² · C_in · C_out · H_out · W_out`
    pub fn flops(&self, input: Dims) -> u64 {
        let out = match self.out_dims(input) {
            Ok(o) => o,
            Err(_) => return 0,
        };
        2 * (self.kernel * self.kernel * self.in_channels * self.out_channels * out.spatial()) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col(&self, x: &Tensor, out: Dims) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (x.dims.height as isize, x.dims.width as isize);
        let b_n = x.batch;
        let ncols = b_n * out.spatial();
        let mut cols = vec![0.0; self.row_len() * ncols];
        for ci in 0..self.in_channels {
            let chan = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..b_n {
                        let img = &chan[b * (h * w) as usize..(b + 1) * (h * w) as usize];
                        for oy in 0..out.height {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let base = (b * out.height + oy) * out.width;
                            for ox in 0..out.width {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w {
                                    dst[base + ox] = img[(iy * w + ix) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], in_dims: Dims, out: Dims, batch: usize) -> Tensor {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (in_dims.height as isize, in_dims.width as isize);
        let ncols = batch * out.spatial();
        let mut dx = Tensor::zeros(in_dims, batch);
        for ci in 0..self.in_channels {
            let chan = dx.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * ncols..(row + 1) * ncols];
                    for b in 0..batch {
                        let img = &mut chan[b * (h * w) as usize..(b + 1) * (h * w) as usize];
                        for oy in 0..out.height {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let base = (b * out.height + oy) * out.width;
                            for ox in 0..out.width {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w {
                                    img[(iy * w + ix) as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let out_dims = self.out_dims(x.dims)?;
        let cols = self.im2col(x, out_dims);
        let ncols = x.batch * out_dims.spatial();
        let mut y = Tensor::zeros(out_dims, x.batch);
        for (o, &bv) in self.bias.value.iter().enumerate() {
            y.data[o * ncols..(o + 1) * ncols].fill(bv);
        }
        gemm(
            self.out_channels,
            self.row_len(),
            ncols,
            &self.weight.value,
            false,
            &cols,
            false,
            1.0,
            &mut y.data,
        );
        Ok((y, cols))
    }

    fn backward(&mut self, cols: &[f64], in_dims: Dims, grad_out: &Tensor) -> Tensor {
        let out_dims = grad_out.dims;
        let batch = grad_out.batch;
        let ncols = batch * out_dims.spatial();
        let row_len = self.row_len();
        gemm(
            self.out_channels,
            ncols,
            row_len,
            &grad_out.data,
            false,
            cols,
            true,
            1.0,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for (o, g) in db.iter_mut().enumerate() {
            *g += grad_out.data[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; row_len * ncols];
        gemm(
            row_len,
            self.out_channels,
            ncols,
            &self.weight.value,
            true,
            &grad_out.data,
            false,
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, in_dims, out_dims, batch)
    }

    pub fn retain_outputs(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.out_channels);
        self.weight.retain_blocks(self.row_len(), keep);
        self.bias.retain_blocks(1, keep);
        self.out_channels = keep.iter().filter(|&&k| k).count();
    }

    pub fn retain_inputs(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.in_channels);
        self.weight
            .retain_inner(self.out_channels, self.kernel * self.kernel, keep);
        self.in_channels = keep.iter().filter(|&&k| k).count();
    }

    /// Weights and bias of output filter `j`.
    pub fn filter(&self, j: usize) -> (&[f64], f64) {
        let r = self.row_len();
        (&self.weight.value[j * r..(j + 1) * r], self.bias.value[j])
    }

    pub fn filter_grad(&self, j: usize) -> (&[f64], f64) {
        let r = self.row_len();
        (&self.weight.grad[j * r..(j + 1) * r], self.bias.grad[j])
    }

    pub fn zero_filter(&mut self, j: usize) {
        let r = self.row_len();
        self.weight.value[j * r..(j + 1) * r].fill(0.0);
        self.bias.value[j] = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound);
        let weight = (0..in_features * out_features)
            .map(|_| uni.sample(rng))
            .collect();
        let bias = (0..out_features).map(|_| uni.sample(rng)).collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn out_dims(&self, d: Dims) -> Result<Dims> {
        if d.spatial() != 1 || d.channels != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {}x1x1 input, got {d}",
                self.in_features
            )));
        }
        Ok(Dims::new(self.out_features, 1, 1))
    }

    /// `2 · in · out`
    pub fn flops(&self) -> u64 {
        2 * (self.in_features * self.out_features) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_dims = self.out_dims(x.dims)?;
        let b = x.batch;
        let mut y = Tensor::zeros(out_dims, b);
        for (o, &bv) in self.bias.value.iter().enumerate() {
            y.data[o * b..(o + 1) * b].fill(bv);
        }
        gemm(
            self.out_features,
            self.in_features,
            b,
            &self.weight.value,
            false,
            &x.data,
            false,
            1.0,
            &mut y.data,
        );
        Ok(y)
    }

    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let b = grad_out.batch;
        gemm(
            self.out_features,
            b,
            self.in_features,
            &grad_out.data,
            false,
            &input.data,
            true,
            1.0,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for (o, g) in db.iter_mut().enumerate() {
            *g += grad_out.data[o * b..(o + 1) * b].iter().sum::<f64>();
        }
        let mut dx = Tensor::zeros(input.dims, b);
        gemm(
            self.in_features,
            self.out_features,
            b,
            &self.weight.value,
            true,
            &grad_out.data,
            false,
            0.0,
            &mut dx.data,
        );
        dx
    }

    pub fn retain_outputs(&mut self, keep: &[bool]) {
        self.weight.retain_blocks(self.in_features, keep);
        self.bias.retain_blocks(1, keep);
        self.out_features = keep.iter().filter(|&&k| k).count();
    }

    pub fn retain_inputs(&mut self, keep: &[bool]) {
        self.weight.retain_inner(self.out_features, 1, keep);
        self.in_features = keep.iter().filter(|&&k| k).count();
    }

    pub fn filter(&self, j: usize) -> (&[f64], f64) {
        let r = self.in_features;
        (&self.weight.value[j * r..(j + 1) * r], self.bias.value[j])
    }

    pub fn filter_grad(&self, j: usize) -> (&[f64], f64) {
        let r = self.in_features;
        (&self.weight.grad[j * r..(j + 1) * r], self.bias.grad[j])
    }

    pub fn zero_filter(&mut self, j: usize) {
        let r = self.in_features;
        self.weight.value[j * r..(j + 1) * r].fill(0.0);
        self.bias.value[j] = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
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

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn check(&self, d: Dims) -> Result<()> {
        if d.channels != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "norm expects {} channels, got {}",
                self.channels, d.channels
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, NormCache)> {
        self.check(x.dims)?;
        let m = x.batch * x.dims.spatial();
        let batch_stats = mode == Mode::Train;
        let mut y = Tensor::zeros(x.dims, x.batch);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; self.channels];
        let mut means = vec![0.0; self.channels];
        let mut vars = vec![0.0; self.channels];
        for c in 0..self.channels {
            let row = x.channel(c);
            let (mean, var) = if batch_stats {
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            means[c] = mean;
            vars[c] = var;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let xh = &mut xhat[c * m..(c + 1) * m];
            let out = y.channel_mut(c);
            for i in 0..m {
                xh[i] = (row[i] - mean) * is;
                out[i] = g * xh[i] + b;
            }
        }
        Ok((
            y,
            NormCache {
                xhat,
                inv_std,
                batch_stats,
                mean: means,
                var: vars,
                count: m,
            },
        ))
    }

    fn backward(&mut self, cache: &NormCache, grad_out: &Tensor) -> Tensor {
        let m = cache.count;
        let mut dx = Tensor::zeros(grad_out.dims, grad_out.batch);
        for c in 0..self.channels {
            let dy = grad_out.channel(c);
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let sum_dy: f64 = dy.iter().sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.gamma.grad_mut()[c] += sum_dy_xh;
            self.beta.grad_mut()[c] += sum_dy;
            let g = self.gamma.value[c];
            let is = cache.inv_std[c];
            let out = dx.channel_mut(c);
            if cache.batch_stats {
                let mf = m as f64;
                for i in 0..m {
                    out[i] = g * is / mf * (mf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            } else {
                for i in 0..m {
                    out[i] = g * is * dy[i];
                }
            }
        }
        dx
    }

    fn commit_stats(&mut self, cache: &NormCache) {
        if !cache.batch_stats {
            return;
        }
        let m = cache.count as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * cache.mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * cache.var[c] * unbias;
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.gamma.retain_blocks(1, keep);
        self.beta.retain_blocks(1, keep);
        let filt = |v: &mut Vec<f64>| {
            *v = v
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .collect()
        };
        filt(&mut self.running_mean);
        filt(&mut self.running_var);
        self.channels = keep.iter().filter(|&&k| k).count();
    }

    pub fn zero_channel(&mut self, j: usize) {
        self.gamma.value[j] = 0.0;
        self.beta.value[j] = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Shortcut {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: BatchNorm,
    pub conv2: Conv2d,
    pub norm2: BatchNorm,
    pub shortcut: Option<Shortcut>,
}

#[derive(Clone, Debug)]
pub struct ResidualCache {
    in_dims: Dims,
    cols1: Vec<f64>,
    n1: NormCache,
    mid_dims: Dims,
    relu1: Vec<bool>,
    cols2: Vec<f64>,
    n2: NormCache,
    shortcut: Option<(Vec<f64>, NormCache)>,
    relu_out: Vec<bool>,
}

impl ResidualBlock {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| Shortcut {
            conv: Conv2d::new(in_ch, out_ch, 1, stride, 0, rng),
            norm: BatchNorm::new(out_ch),
        });
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            norm1: BatchNorm::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            norm2: BatchNorm::new(out_ch),
            shortcut,
        }
    }

    pub fn out_dims(&self, d: Dims) -> Result<Dims> {
        let mid = self.conv1.out_dims(d)?;
        self.norm1.check(mid)?;
        let out = self.conv2.out_dims(mid)?;
        self.norm2.check(out)?;
        match &self.shortcut {
            Some(sc) => {
                let so = sc.conv.out_dims(d)?;
                if so != out {
                    return Err(Error::ShapeMismatch(format!(
                        "residual shortcut gives {so}, main path {out}"
                    )));
                }
            }
            None if d != out => {
                return Err(Error::ShapeMismatch(format!(
                    "identity shortcut needs matching dims, {d} vs {out}"
                )))
            }
            None => {}
        }
        Ok(out)
    }

    pub fn flops(&self, d: Dims) -> u64 {
        let mid = match self.conv1.out_dims(d) {
            Ok(m) => m,
            Err(_) => return 0,
        };
        self.conv1.flops(d)
            + self.conv2.flops(mid)
            + self.shortcut.as_ref().map_or(0, |s| s.conv.flops(d))
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.norm1.param_count()
            + self.conv2.param_count()
            + self.norm2.param_count()
            + self
                .shortcut
                .as_ref()
                .map_or(0, |s| s.conv.param_count() + s.norm.param_count())
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ResidualCache)> {
        self.out_dims(x.dims)?;
        let (h, cols1) = self.conv1.forward(x)?;
        let mid_dims = h.dims;
        let (mut h, n1) = self.norm1.forward(&h, mode)?;
        let relu1 = relu_inplace(&mut h);
        let (h, cols2) = self.conv2.forward(&h)?;
        let (mut y, n2) = self.norm2.forward(&h, mode)?;
        let shortcut = match &self.shortcut {
            Some(sc) => {
                let (s, cols) = sc.conv.forward(x)?;
                let (s, ns) = sc.norm.forward(&s, mode)?;
                y.add_assign(&s);
                Some((cols, ns))
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        let relu_out = relu_inplace(&mut y);
        Ok((
            y,
            ResidualCache {
                in_dims: x.dims,
                cols1,
                n1,
                mid_dims,
                relu1,
                cols2,
                n2,
                shortcut,
                relu_out,
            },
        ))
    }

    fn backward(&mut self, cache: &ResidualCache, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        relu_mask(&mut g, &cache.relu_out);
        let dh = self.norm2.backward(&cache.n2, &g);
        let mut dh = self.conv2.backward(&cache.cols2, cache.mid_dims, &dh);
        relu_mask(&mut dh, &cache.relu1);
        let dh = self.norm1.backward(&cache.n1, &dh);
        let mut dx = self.conv1.backward(&cache.cols1, cache.in_dims, &dh);
        match (&mut self.shortcut, &cache.shortcut) {
            (Some(sc), Some((cols, ns))) => {
                let ds = sc.norm.backward(ns, &g);
                let ds = sc.conv.backward(cols, cache.in_dims, &ds);
                dx.add_assign(&ds);
            }
            _ => dx.add_assign(&g),
        }
        dx
    }

    fn commit_stats(&mut self, cache: &ResidualCache) {
        self.norm1.commit_stats(&cache.n1);
        self.norm2.commit_stats(&cache.n2);
        if let (Some(sc), Some((_, ns))) = (&mut self.shortcut, &cache.shortcut) {
            sc.norm.commit_stats(ns);
        }
    }
}

fn relu_inplace(t: &mut Tensor) -> Vec<bool> {
    t.data
        .iter_mut()
        .map(|v| {
            if *v > 0.0 {
                true
            } else {
                *v = 0.0;
                false
            }
        })
        .collect()
}

fn relu_mask(t: &mut Tensor, mask: &[bool]) {
    for (v, &m) in t.data.iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Layer enum
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Norm(BatchNorm),
    Relu,
    GlobalAvgPool,
    Residual(ResidualBlock),
}

#[derive(Clone, Debug)]
pub enum Cache {
    Conv { cols: Vec<f64>, in_dims: Dims },
    Linear { input: Tensor },
    Norm(NormCache),
    Relu { mask: Vec<bool> },
    Pool { in_dims: Dims },
    Residual(Box<ResidualCache>),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::Norm(_) => "norm",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Residual(_) => "residual",
        }
    }

    /// Layers carrying convolution or linear weights; these are the
    /// candidate split points and sensitivity units.
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Linear(_) | Layer::Residual(_))
    }

    pub fn out_dims(&self, d: Dims) -> Result<Dims> {
        match self {
            Layer::Conv(c) => c.out_dims(d),
            Layer::Linear(l) => l.out_dims(d),
            Layer::Norm(n) => n.check(d).map(|_| d),
            Layer::Relu => Ok(d),
            Layer::GlobalAvgPool => Ok(Dims::new(d.channels, 1, 1)),
            Layer::Residual(r) => r.out_dims(d),
        }
    }

    /// Multiply-adds counted as two operations; norms, activations and
    /// pooling are not counted.
    pub fn flops(&self, input: Dims) -> u64 {
        match self {
            Layer::Conv(c) => c.flops(input),
            Layer::Linear(l) => l.flops(),
            Layer::Residual(r) => r.flops(input),
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Linear(l) => l.param_count(),
            Layer::Norm(n) => n.param_count(),
            Layer::Residual(r) => r.param_count(),
            Layer::Relu | Layer::GlobalAvgPool => 0,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            Layer::Residual(r) => {
                let mut v = vec![
                    &mut r.conv1.weight,
                    &mut r.conv1.bias,
                    &mut r.norm1.gamma,
                    &mut r.norm1.beta,
                    &mut r.conv2.weight,
                    &mut r.conv2.bias,
                    &mut r.norm2.gamma,
                    &mut r.norm2.beta,
                ];
                if let Some(sc) = &mut r.shortcut {
                    v.extend([
                        &mut sc.conv.weight,
                        &mut sc.conv.bias,
                        &mut sc.norm.gamma,
                        &mut sc.norm.beta,
                    ]);
                }
                v
            }
            Layer::Relu | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    /// The weight tensors (no biases or norm affines) whose elements are
    /// scored for sensitivity, in a fixed order.
    pub fn sensitivity_weights(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => vec![&c.weight],
            Layer::Linear(l) => vec![&l.weight],
            Layer::Residual(r) => {
                let mut v = vec![&r.conv1.weight, &r.conv2.weight];
                if let Some(sc) = &r.shortcut {
                    v.push(&sc.conv.weight);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv(c) => {
                let (y, cols) = c.forward(x)?;
                Ok((
                    y,
                    Cache::Conv {
                        cols,
                        in_dims: x.dims,
                    },
                ))
            }
            Layer::Linear(l) => {
                let y = l.forward(x)?;
                Ok((y, Cache::Linear { input: x.clone() }))
            }
            Layer::Norm(n) => {
                let (y, c) = n.forward(x, mode)?;
                Ok((y, Cache::Norm(c)))
            }
            Layer::Relu => {
                let mut y = x.clone();
                let mask = relu_inplace(&mut y);
                Ok((y, Cache::Relu { mask }))
            }
            Layer::GlobalAvgPool => {
                let hw = x.dims.spatial();
                let mut y = Tensor::zeros(Dims::new(x.dims.channels, 1, 1), x.batch);
                for (i, v) in y.data.iter_mut().enumerate() {
                    *v = x.data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
                }
                Ok((y, Cache::Pool { in_dims: x.dims }))
            }
            Layer::Residual(r) => {
                let (y, c) = r.forward(x, mode)?;
                Ok((y, Cache::Residual(Box::new(c))))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Cache, grad_out: &Tensor) -> Tensor {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { cols, in_dims }) => c.backward(cols, *in_dims, grad_out),
            (Layer::Linear(l), Cache::Linear { input }) => l.backward(input, grad_out),
            (Layer::Norm(n), Cache::Norm(c)) => n.backward(c, grad_out),
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut g = grad_out.clone();
                relu_mask(&mut g, mask);
                g
            }
            (Layer::GlobalAvgPool, Cache::Pool { in_dims }) => {
                let hw = in_dims.spatial();
                let mut dx = Tensor::zeros(*in_dims, grad_out.batch);
                for (i, g) in grad_out.data.iter().enumerate() {
                    dx.data[i * hw..(i + 1) * hw].fill(g / hw as f64);
                }
                dx
            }
            (Layer::Residual(r), Cache::Residual(c)) => r.backward(c, grad_out),
            (layer, _) => panic!("cache does not match layer {}", layer.kind_name()),
        }
    }

    pub fn commit_stats(&mut self, cache: &Cache) {
        match (self, cache) {
            (Layer::Norm(n), Cache::Norm(c)) => n.commit_stats(c),
            (Layer::Residual(r), Cache::Residual(c)) => r.commit_stats(c),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Dims, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(dims, batch);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    // Scalar objective: sum of output ⊙ fixed random projection.
    fn objective(layer: &Layer, x: &Tensor, proj: &[f64], mode: Mode) -> f64 {
        let (y, _) = layer.forward(x, mode).unwrap();
        y.data.iter().zip(proj).map(|(a, b)| a * b).sum()
    }

    fn check_layer_gradients(mut layer: Layer, dims: Dims, mode: Mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(dims, 3, &mut rng);
        let (y, cache) = layer.forward(&x, mode).unwrap();
        let proj: Vec<f64> = (0..y.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Tensor {
            dims: y.dims,
            batch: y.batch,
            data: proj.clone(),
        };
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&cache, &g);
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&layer, &xp, &proj, mode) - objective(&layer, &xm, &proj, mode))
                / (2.0 * h);
            assert!(
                (fd - dx.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input grad {i}: fd {fd} vs {}",
                dx.data[i]
            );
        }
        let n_params = layer.params_mut().len();
        for pi in 0..n_params {
            let len = layer.params_mut()[pi].len();
            for j in (0..len).step_by(3) {
                let analytic = layer.params_mut()[pi].grad[j];
                let orig = layer.params_mut()[pi].value[j];
                layer.params_mut()[pi].value[j] = orig + h;
                let fp = objective(&layer, &x, &proj, mode);
                layer.params_mut()[pi].value[j] = orig - h;
                let fm = objective(&layer, &x, &proj, mode);
                layer.params_mut()[pi].value[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        check_layer_gradients(Layer::Conv(conv), Dims::new(2, 5, 5), Mode::Train);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(4, 3, &mut rng);
        check_layer_gradients(Layer::Linear(lin), Dims::new(4, 1, 1), Mode::Train);
    }

    #[test]
    fn norm_gradients_match_finite_differences_in_both_modes() {
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        bn.running_mean = vec![0.2, -0.1, 0.0];
        bn.running_var = vec![0.5, 2.0, 1.0];
        check_layer_gradients(Layer::Norm(bn.clone()), Dims::new(3, 2, 2), Mode::Train);
        check_layer_gradients(Layer::Norm(bn), Dims::new(3, 2, 2), Mode::Eval);
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = ResidualBlock::new(2, 3, 2, &mut rng);
        assert!(proj.shortcut.is_some());
        check_layer_gradients(Layer::Residual(proj), Dims::new(2, 4, 4), Mode::Train);
        let ident = ResidualBlock::new(2, 2, 1, &mut rng);
        assert!(ident.shortcut.is_none());
        check_layer_gradients(Layer::Residual(ident), Dims::new(2, 3, 3), Mode::Train);
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        check_layer_gradients(Layer::GlobalAvgPool, Dims::new(2, 3, 3), Mode::Train);
    }

    #[test]
    fn single_conv_flops_follow_the_counting_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(1, 1, 3, 1, 1, &mut rng);
        // 3x3 kernel, one channel in and out, 4x4 output.
        assert_eq!(conv.flops(Dims::new(1, 4, 4)), 288);
    }

    #[test]
    fn running_stats_only_change_when_committed() {
        let bn = Layer::Norm(BatchNorm::new(2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(Dims::new(2, 2, 2), 4, &mut rng);
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        let mut bn2 = bn.clone();
        if let Layer::Norm(n) = &bn2 {
            assert_eq!(n.running_mean, vec![0.0, 0.0]);
        }
        bn2.commit_stats(&cache);
        if let Layer::Norm(n) = &bn2 {
            assert!(n.running_mean.iter().any(|&m| m != 0.0));
        }
    }

    #[test]
    fn retain_outputs_drops_filter_rows_and_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::new(2, 3, 1, 1, 0, &mut rng);
        conv.weight.momentum = (0..6).map(|v| v as f64).collect();
        let w2 = conv.filter(2).0.to_vec();
        conv.retain_outputs(&[true, false, true]);
        assert_eq!(conv.out_channels, 2);
        assert_eq!(conv.filter(1).0, &w2[..]);
        assert_eq!(conv.weight.momentum, vec![0.0, 1.0, 4.0, 5.0]);
        conv.retain_inputs(&[false, true]);
        assert_eq!(conv.in_channels, 1);
        assert_eq!(conv.weight.value.len(), 2);
        assert_eq!(conv.weight.value[1], w2[1]);
    }

    #[test]
    fn build_rejects_linear_on_spatial_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = vec![LayerSpec::Linear { out_features: 2 }];
        assert!(build_layers(&specs, Dims::new(1, 4, 4), &mut rng).is_err());
    }
}
