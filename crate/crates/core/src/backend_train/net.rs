//! Trainable backend: 1x1 bottleneck, then 3x3 conv blocks, global average
//! pool and a linear classifier. Every conv (the bottleneck included) is
//! followed by batch normalization and ReLU. Forward and backward passes are
//! written out by hand; per-image work runs in parallel and every reduction
//! over images is taken in image order.

use std::fmt::{Debug, Display};

use ndarray::{
    Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis,
    LinalgScalar, ScalarOperand,
};
use num_traits::{Float, NumAssign};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, TAG_INIT};

/// Floating-point element type of a backend (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar: LinalgScalar + Float + NumAssign + ScalarOperand + Send + Sync + Debug + Display + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// V1 channel count feeding the bottleneck.
    pub in_channels: usize,
    pub bottleneck: usize,
    /// 3x3 conv blocks, padding 1.
    pub head: Vec<HeadBlock>,
    pub num_classes: usize,
}

impl BackendConfig {
    /// 64-channel bottleneck, head `[64 stride 1, 128 stride 2]`.
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        BackendConfig {
            in_channels,
            bottleneck: 64,
            head: vec![HeadBlock { channels: 64, stride: 1 }, HeadBlock { channels: 128, stride: 2 }],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.bottleneck == 0 {
            return Err(Error::param("backend", "channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "need at least two classes"));
        }
        if self.head.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::param("head", "block channels and stride must be positive"));
        }
        Ok(())
    }
}

/// Convolution with `[out, in, k, k]` weights and padding `(k - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("standard layout")
    }

    fn pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1
    }

    fn forward(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let (k, s) = (self.kernel(), self.stride);
        let (oh, ow) = (out_size(h, k, s), out_size(w, k, s));
        let mut z = if self.pointwise() {
            let xs = x.as_standard_layout();
            self.matrix().dot(&xs.view().into_shape_with_order((c, h * w)).expect("standard layout"))
        } else {
            self.matrix().dot(&im2col(x, k, s))
        };
        if let Some(b) = &self.bias {
            z += &b.view().insert_axis(Axis(1));
        }
        z.into_shape_with_order((self.out_channels(), oh, ow)).expect("output plane")
    }

    /// `cols(x) * dz^T` as `[in*k*k, out]`, the transpose of the weight
    /// gradient.
    fn weight_grad_t(&self, x: ArrayView3<'_, T>, dz: &Array3<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (o, oh, ow) = dz.dim();
        let dzt = dz.view().into_shape_with_order((o, oh * ow)).expect("standard layout").t().as_standard_layout().into_owned();
        if self.pointwise() {
            let xs = x.as_standard_layout();
            xs.view().into_shape_with_order((c, h * w)).expect("standard layout").dot(&dzt)
        } else {
            im2col(x, self.kernel(), self.stride).dot(&dzt)
        }
    }

    fn input_grad(&self, dz: &Array3<T>, input: (usize, usize, usize)) -> Array3<T> {
        let (o, oh, ow) = dz.dim();
        let dzm = dz.view().into_shape_with_order((o, oh * ow)).expect("standard layout");
        let dcols = self.matrix().t().dot(&dzm);
        col2im(&dcols, input, self.kernel(), self.stride)
    }
}

fn out_size(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * ((k - 1) / 2) - k) / stride + 1
}

/// Per-channel affine normalization with batch statistics in training and
/// running statistics in evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }

    fn normalize(z: &Array3<T>, mean: &[f64], var: &[f64]) -> Array3<T> {
        let mut out = z.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, inv) = (T::of(mean[c]), T::of(1.0 / (var[c] + BN_EPS).sqrt()));
            plane.mapv_inplace(|v| (v - m) * inv);
        }
        out
    }

    /// `relu(gamma * xhat + beta)`.
    fn activate(&self, xhat: &Array3<T>) -> Array3<T> {
        let mut out = xhat.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma[c], self.beta[c]);
            plane.mapv_inplace(|v| (g * v + b).max(T::zero()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Output range `[lo, hi)` along one axis whose tap `t` lands inside `0..n`.
fn valid_range(n: usize, k: usize, stride: usize, t: usize, out: usize) -> (usize, usize) {
    let pad = (k - 1) / 2;
    // stride * o + t - pad in 0..n
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi = if n + pad > t { ((n + pad - t - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// `[C, H, W]` to `[C*k*k, Ho*Wo]`.
fn im2col<T: Scalar>(x: ArrayView3<'_, T>, k: usize, stride: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = (k - 1) / 2;
    let (ho, wo) = (out_size(h, k, stride), out_size(w, k, stride));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ty in 0..k {
            let (y0, y1) = valid_range(h, k, stride, ty, ho);
            for tx in 0..k {
                let (x0, x1) = valid_range(w, k, stride, tx, wo);
                let row = &mut dst[((ch * k + ty) * k + tx) * ho * wo..][..ho * wo];
                for oy in y0..y1 {
                    let line = &plane[(stride * oy + ty - pad) * w..][..w];
                    let out = &mut row[oy * wo..][..wo];
                    if stride == 1 {
                        out[x0..x1].copy_from_slice(&line[x0 + tx - pad..x1 + tx - pad]);
                    } else {
                        for ox in x0..x1 {
                            out[ox] = line[stride * ox + tx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &Array2<T>, (c, h, w): (usize, usize, usize), k: usize, stride: usize) -> Array3<T> {
    let pad = (k - 1) / 2;
    let (ho, wo) = (out_size(h, k, stride), out_size(w, k, stride));
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ty in 0..k {
            let (y0, y1) = valid_range(h, k, stride, ty, ho);
            for tx in 0..k {
                let (x0, x1) = valid_range(w, k, stride, tx, wo);
                let row = &src[((ch * k + ty) * k + tx) * ho * wo..][..ho * wo];
                for oy in y0..y1 {
                    let line = &mut plane[(stride * oy + ty - pad) * w..][..w];
                    let inp = &row[oy * wo..][..wo];
                    for ox in x0..x1 {
                        line[stride * ox + tx - pad] += inp[ox];
                    }
                }
            }
        }
    }
    x
}

/// Cross-entropy of one example via log-sum-exp. Returns the loss and the
/// softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<'_, T>, label: usize) -> (T, Array1<T>) {
    let m = logits.fold(T::neg_infinity(), |a, &b| a.max(b));
    let sum = logits.fold(T::zero(), |a, &l| a + (l - m).exp());
    let lse = m + sum.ln();
    (lse - logits[label], logits.mapv(|l| (l - lse).exp()))
}

pub(crate) fn argmax<T: Scalar>(v: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Batch mean and biased variance of every normalization layer, as used in
/// a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Values per channel entering each statistic.
    pub count: Vec<usize>,
}

/// Result of a training-mode forward and backward pass over one batch.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    /// Mean cross-entropy.
    pub loss: T,
    pub grads: Backend<T>,
    pub predictions: Vec<usize>,
    pub stats: BatchStats,
}

/// Images per gradient partial sum.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Backend<T> {
    config: BackendConfig,
    /// Bottleneck first, then the head blocks.
    pub layers: Vec<Layer<T>>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> Backend<T> {
    /// Zero weights, unit scales, running statistics at mean 0 and
    /// variance 1.
    pub fn zeros(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = vec![Layer {
            conv: Conv2d {
                weight: Array4::zeros((config.bottleneck, config.in_channels, 1, 1)),
                bias: Some(Array1::zeros(config.bottleneck)),
                stride: 1,
            },
            bn: BatchNorm::new(config.bottleneck),
        }];
        let mut c = config.bottleneck;
        for b in &config.head {
            layers.push(Layer {
                conv: Conv2d { weight: Array4::zeros((b.channels, c, 3, 3)), bias: None, stride: b.stride },
                bn: BatchNorm::new(b.channels),
            });
            c = b.channels;
        }
        Ok(Backend {
            config: config.clone(),
            layers,
            classifier: Linear { weight: Array2::zeros((config.num_classes, c)), bias: Array1::zeros(config.num_classes) },
        })
    }

    /// Normal init with std `sqrt(2 / fan_in)` for convs (all feed a ReLU)
    /// and `sqrt(1 / fan_in)` for the classifier; zero biases.
    pub fn new(config: &BackendConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = derived_rng(seed, TAG_INIT, 0, 0);
        let mut fill = |mut w: ArrayViewMutD<'_, T>, fan_in: usize, gain: f64| {
            let d = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            w.iter_mut().for_each(|v| *v = T::of(d.sample(&mut rng)));
        };
        for l in net.layers.iter_mut() {
            let (_, i, k, _) = l.conv.weight.dim();
            fill(l.conv.weight.view_mut().into_dyn(), i * k * k, 2.0);
        }
        let fan = net.classifier.weight.shape()[1];
        fill(net.classifier.weight.view_mut().into_dyn(), fan, 1.0);
        Ok(net)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Same layout with every trainable tensor at zero, for gradients and
    /// momentum buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::zeros(&self.config).expect("validated config");
        for l in out.layers.iter_mut() {
            l.bn.gamma.fill(T::zero());
        }
        out
    }

    fn layer_name(i: usize) -> String {
        if i == 0 {
            "bottleneck".into()
        } else {
            format!("head.{}", i - 1)
        }
    }

    /// Named trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let n = Self::layer_name(i);
            out.push((format!("{n}.weight"), l.conv.weight.view().into_dyn()));
            if let Some(b) = &l.conv.bias {
                out.push((format!("{n}.bias"), b.view().into_dyn()));
            }
            out.push((format!("{n}.bn.gamma"), l.bn.gamma.view().into_dyn()));
            out.push((format!("{n}.bn.beta"), l.bn.beta.view().into_dyn()));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.view().into_dyn()));
        out.push(("classifier.bias".into(), self.classifier.bias.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = Self::layer_name(i);
            out.push((format!("{n}.weight"), l.conv.weight.view_mut().into_dyn()));
            if let Some(b) = &mut l.conv.bias {
                out.push((format!("{n}.bias"), b.view_mut().into_dyn()));
            }
            out.push((format!("{n}.bn.gamma"), l.bn.gamma.view_mut().into_dyn()));
            out.push((format!("{n}.bn.beta"), l.bn.beta.view_mut().into_dyn()));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.view_mut().into_dyn()));
        out.push(("classifier.bias".into(), self.classifier.bias.view_mut().into_dyn()));
        out
    }

    /// Running statistics, which are not trained by gradient.
    pub fn buffers(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let n = Self::layer_name(i);
            out.push((format!("{n}.bn.running_mean"), l.bn.running_mean.view().into_dyn()));
            out.push((format!("{n}.bn.running_var"), l.bn.running_var.view().into_dyn()));
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = Self::layer_name(i);
            out.push((format!("{n}.bn.running_mean"), l.bn.running_mean.view_mut().into_dyn()));
            out.push((format!("{n}.bn.running_var"), l.bn.running_var.view_mut().into_dyn()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other` over the trainable tensors.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    /// Bottleneck weights as `[out, in]`, bias excluded.
    pub fn bottleneck_weights(&self) -> Array2<T> {
        let w = &self.layers[0].conv.weight;
        let (o, i, _, _) = w.dim();
        w.to_shape((o, i)).expect("1x1 kernel").to_owned()
    }

    /// Trainable tensors followed by the running statistics, as `f32`.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::default();
        for (name, t) in self.tensors().into_iter().chain(self.buffers()) {
            tf.push(name, t.mapv(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        tf
    }

    pub fn from_tensor_file(config: &BackendConfig, tf: &TensorFile) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let load = |name: &str, dst: &mut ArrayViewMutD<'_, T>| -> Result<()> {
            let src = tf.get(name).ok_or_else(|| Error::format(None, format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Shape(format!("tensor `{name}` is {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            dst.zip_mut_with(src, |d, &s| *d = T::of(s as f64));
            Ok(())
        };
        for (name, mut dst) in net.tensors_mut() {
            load(&name, &mut dst)?;
        }
        for (name, mut dst) in net.buffers_mut() {
            load(&name, &mut dst)?;
        }
        Ok(net)
    }

    fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim.0 != self.config.in_channels {
            return Err(Error::Shape(format!("{} V1 channels, backend expects {}", dim.0, self.config.in_channels)));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes: self.config.num_classes });
        }
        Ok(())
    }

    fn head(&self, a: &Array3<T>) -> (Array1<T>, Array1<T>) {
        let n = T::of((a.shape()[1] * a.shape()[2]) as f64);
        let pooled = a.axis_iter(Axis(0)).map(|p| p.sum() / n).collect::<Array1<T>>();
        let logits = self.classifier.weight.dot(&pooled) + &self.classifier.bias;
        (pooled, logits)
    }

    /// Evaluation-mode logits for one V1 map `[C, H, W]`.
    pub fn forward_image(&self, x: ArrayView3<'_, T>) -> Result<Array1<T>> {
        self.check_input(x.dim())?;
        let mut a: Option<Array3<T>> = None;
        for l in &self.layers {
            let z = l.conv.forward(a.as_ref().map_or(x.view(), |a| a.view()));
            let mean: Vec<f64> = l.bn.running_mean.iter().map(|v| v.f64()).collect();
            let var: Vec<f64> = l.bn.running_var.iter().map(|v| v.f64()).collect();
            a = Some(l.bn.activate(&BatchNorm::normalize(&z, &mean, &var)));
        }
        Ok(self.head(a.as_ref().expect("at least the bottleneck")).1)
    }

    /// Evaluation-mode logits `[batch, classes]`.
    pub fn logits(&self, acts: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let rows = acts
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|x| self.forward_image(x))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows.len(), self.config.num_classes));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }

    /// Evaluation-mode mean cross-entropy and logits.
    pub fn forward_loss(&self, acts: ArrayView4<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
        self.check_labels(labels, acts.shape()[0])?;
        let logits = self.logits(acts)?;
        let total = logits.axis_iter(Axis(0)).zip(labels).fold(T::zero(), |a, (row, &l)| a + cross_entropy(row, l).0);
        Ok((total / T::of(labels.len() as f64), logits))
    }

    /// Training-mode (batch statistics) mean cross-entropy, no gradients.
    pub fn train_loss(&self, acts: ArrayView4<'_, T>, labels: &[usize]) -> Result<T> {
        let xs: Vec<ArrayView3<'_, T>> = acts.axis_iter(Axis(0)).collect();
        self.check_labels(labels, xs.len())?;
        let tr = self.forward_train(&xs)?;
        let total = tr.logits.iter().zip(labels).fold(T::zero(), |a, (l, &y)| a + cross_entropy(l.view(), y).0);
        Ok(total / T::of(labels.len() as f64))
    }

    /// Training-mode mean loss and its gradient.
    pub fn loss_and_grad(&self, acts: ArrayView4<'_, T>, labels: &[usize]) -> Result<(T, Self)> {
        let xs: Vec<ArrayView3<'_, T>> = acts.axis_iter(Axis(0)).collect();
        let r = self.batch_grad(&xs, labels)?;
        Ok((r.loss, r.grads))
    }

    fn forward_train(&self, xs: &[ArrayView3<'_, T>]) -> Result<TrainTrace<T>> {
        if xs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for x in xs {
            self.check_input(x.dim())?;
        }
        let mut xhat: Vec<Vec<Array3<T>>> = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Vec<Array3<T>>> = Vec::with_capacity(self.layers.len());
        let mut stats = BatchStats { mean: Vec::new(), var: Vec::new(), count: Vec::new() };
        for (li, l) in self.layers.iter().enumerate() {
            let z: Vec<Array3<T>> = if li == 0 {
                xs.par_iter().map(|x| l.conv.forward(x.view())).collect()
            } else {
                acts[li - 1].par_iter().map(|a| l.conv.forward(a.view())).collect()
            };
            let (mean, var, count) = channel_moments(&z);
            let xh: Vec<Array3<T>> = z.par_iter().map(|z| BatchNorm::normalize(z, &mean, &var)).collect();
            acts.push(xh.par_iter().map(|x| l.bn.activate(x)).collect());
            xhat.push(xh);
            stats.mean.push(mean);
            stats.var.push(var);
            stats.count.push(count);
        }
        let heads: Vec<(Array1<T>, Array1<T>)> =
            acts.last().expect("bottleneck").par_iter().map(|a| self.head(a)).collect();
        let (pooled, logits) = heads.into_iter().unzip();
        Ok(TrainTrace { xhat, acts, pooled, logits, stats })
    }

    /// Training-mode forward and backward over one batch of V1 maps.
    pub fn batch_grad(&self, xs: &[ArrayView3<'_, T>], labels: &[usize]) -> Result<BatchGrad<T>> {
        self.check_labels(labels, xs.len())?;
        let tr = self.forward_train(xs)?;
        let b = xs.len();
        let scale = T::one() / T::of(b as f64);
        let mut grads = self.zeros_like();

        let mut loss = T::zero();
        let mut predictions = Vec::with_capacity(b);
        let mut dlogits = Vec::with_capacity(b);
        for (lg, &y) in tr.logits.iter().zip(labels) {
            let (l, mut p) = cross_entropy(lg.view(), y);
            loss += l;
            predictions.push(argmax(lg.view()));
            p[y] -= T::one();
            p.mapv_inplace(|v| v * scale);
            dlogits.push(p);
        }
        for (d, pooled) in dlogits.iter().zip(&tr.pooled) {
            grads.classifier.bias += d;
            grads.classifier.weight += &d.view().insert_axis(Axis(1)).dot(&pooled.view().insert_axis(Axis(0)));
        }

        // gradient w.r.t. the last layer's post-ReLU output
        let last = tr.acts.last().expect("bottleneck");
        let mut da: Vec<Array3<T>> = dlogits
            .par_iter()
            .zip(last.par_iter())
            .map(|(d, a)| {
                let dp = self.classifier.weight.t().dot(d);
                let n = T::of((a.shape()[1] * a.shape()[2]) as f64);
                let mut g = Array3::<T>::zeros(a.dim());
                for (c, mut plane) in g.axis_iter_mut(Axis(0)).enumerate() {
                    plane.fill(dp[c] / n);
                }
                g
            })
            .collect();

        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let xhat = &tr.xhat[li];
            let act = &tr.acts[li];
            let dy: Vec<Array3<T>> = da
                .into_par_iter()
                .zip(act.par_iter())
                .map(|(mut d, a)| {
                    d.zip_mut_with(a, |g, &v| {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    d
                })
                .collect();
            let c = l.conv.out_channels();
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dyx = vec![0.0f64; c];
            for (d, x) in dy.iter().zip(xhat) {
                for ch in 0..c {
                    let (dp, xp) = (d.index_axis(Axis(0), ch), x.index_axis(Axis(0), ch));
                    sum_dy[ch] += dp.iter().fold(0.0, |a, v| a + v.f64());
                    sum_dyx[ch] += dp.iter().zip(xp.iter()).fold(0.0, |a, (g, v)| a + g.f64() * v.f64());
                }
            }
            let gl = &mut grads.layers[li];
            for ch in 0..c {
                gl.bn.gamma[ch] += T::of(sum_dyx[ch]);
                gl.bn.beta[ch] += T::of(sum_dy[ch]);
            }
            let m = tr.stats.count[li] as f64;
            let var = &tr.stats.var[li];
            let dz: Vec<Array3<T>> = dy
                .into_par_iter()
                .zip(xhat.par_iter())
                .map(|(mut d, x)| {
                    for ch in 0..c {
                        let k = T::of(l.bn.gamma[ch].f64() / (var[ch] + BN_EPS).sqrt());
                        let (mdy, mdyx) = (T::of(sum_dy[ch] / m), T::of(sum_dyx[ch] / m));
                        let mut dp = d.index_axis_mut(Axis(0), ch);
                        dp.zip_mut_with(&x.index_axis(Axis(0), ch), |g, &xv| *g = k * (*g - mdy - xv * mdyx));
                    }
                    d
                })
                .collect();

            let inputs: Vec<ArrayView3<'_, T>> =
                if li == 0 { xs.iter().map(|x| x.view()).collect() } else { tr.acts[li - 1].iter().map(|a| a.view()).collect() };
            let partial: Vec<(Array2<T>, Array1<T>)> = (0..b.div_ceil(CHUNK))
                .into_par_iter()
                .map(|k| {
                    let (o, i, kk, _) = l.conv.weight.dim();
                    let mut gw = Array2::<T>::zeros((i * kk * kk, o));
                    let mut gb = Array1::<T>::zeros(o);
                    for j in k * CHUNK..((k + 1) * CHUNK).min(b) {
                        gw += &l.conv.weight_grad_t(inputs[j], &dz[j]);
                        if l.conv.bias.is_some() {
                            gb += &dz[j].sum_axis(Axis(2)).sum_axis(Axis(1));
                        }
                    }
                    (gw, gb)
                })
                .collect();
            let gl = &mut grads.layers[li];
            let (wo, wi) = (partial[0].0.dim().1, partial[0].0.dim().0);
            let mut gw = gl.conv.weight.view_mut().into_shape_with_order((wo, wi)).expect("standard layout");
            for (w, _) in &partial {
                gw += &w.t();
            }
            if let Some(bias) = &mut gl.conv.bias {
                for (_, bb) in &partial {
                    *bias += bb;
                }
            }
            da = if li > 0 {
                let dims: Vec<(usize, usize, usize)> = tr.acts[li - 1].iter().map(|a| a.dim()).collect();
                dz.par_iter().zip(dims.par_iter()).map(|(d, &dim)| l.conv.input_grad(d, dim)).collect()
            } else {
                Vec::new()
            };
        }
        Ok(BatchGrad { loss: loss * scale, grads, predictions, stats: tr.stats })
    }

    /// Exponential moving average of batch statistics into the running
    /// ones; the variance is stored unbiased.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for (li, l) in self.layers.iter_mut().enumerate() {
            let n = stats.count[li] as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..l.bn.gamma.len() {
                let rm = l.bn.running_mean[c].f64();
                let rv = l.bn.running_var[c].f64();
                l.bn.running_mean[c] = T::of((1.0 - momentum) * rm + momentum * stats.mean[li][c]);
                l.bn.running_var[c] = T::of((1.0 - momentum) * rv + momentum * stats.var[li][c] * unbias);
            }
        }
    }
}

struct TrainTrace<T> {
    /// Normalized pre-activations per layer and image.
    xhat: Vec<Vec<Array3<T>>>,
    /// Post-ReLU outputs per layer and image.
    acts: Vec<Vec<Array3<T>>>,
    pooled: Vec<Array1<T>>,
    logits: Vec<Array1<T>>,
    stats: BatchStats,
}

/// Per-channel mean and biased variance over images and positions, in f64.
fn channel_moments<T: Scalar>(z: &[Array3<T>]) -> (Vec<f64>, Vec<f64>, usize) {
    let c = z[0].shape()[0];
    let count: usize = z.iter().map(|a| a.shape()[1] * a.shape()[2]).sum();
    let mut mean = vec![0.0; c];
    for a in z {
        for (ch, p) in a.axis_iter(Axis(0)).enumerate() {
            mean[ch] += p.iter().fold(0.0, |s, v| s + v.f64());
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for a in z {
        for (ch, p) in a.axis_iter(Axis(0)).enumerate() {
            var[ch] += p.iter().fold(0.0, |s, v| s + (v.f64() - mean[ch]).powi(2));
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var, count)
}
