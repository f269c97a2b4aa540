//! Minimal CPU layer library: NCHW tensors and layers with explicit,
//! cache-based backward passes.
//!
//! Every layer stores what its backward pass needs during a caching forward
//! pass. Backward calls read the cache without consuming it, so several
//! upstream gradients can be pushed through the same forward pass. Parameter
//! gradients accumulate into [`Param::grad`] until [`Module::zero_grad`].

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type of tensors. Implemented for `f32` (training)
/// and `f64` (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    /// `C = alpha * A * B + beta * C` for strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`) matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite value")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) = alpha * op(A) * op(B) + beta * C`, where `op(A)` is
/// `m×k` and `op(B)` is `k×n`. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// Dense `N×C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect() }
    }

    /// Flattens `N×C×H×W` into `N×(CHW)×1×1` without copying semantics changes.
    pub fn flatten(self) -> Tensor<T> {
        let n = self.shape[0];
        let f = self.item_len();
        Tensor { shape: [n, f, 1, 1], data: self.data }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Tensor<T> {
        Tensor::from_vec(shape, self.data)
    }
}

/// Learnable parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn filled(len: usize, v: T) -> Self {
        Param::new(vec![v; len])
    }

    /// Values drawn from `N(0, std²)`. Samples are drawn in f64 so f32 and f64
    /// models built from the same seed agree up to rounding.
    pub fn normal<R: Rng>(len: usize, std: f64, rng: &mut R) -> Self {
        Param::new(
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::from_f64_lossy(z * std)
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// How a forward pass treats batch statistics and caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics, running-stat update, caches for backward.
    Train,
    /// Like `Train` but leaves running statistics untouched; used when the
    /// same batch is evaluated repeatedly (gradient probes).
    Probe,
    /// Running statistics, no caches.
    Infer,
}

impl Pass {
    pub fn caches(self) -> bool {
        self != Pass::Infer
    }
}

/// Parameter and buffer traversal with stable, dotted path names.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Vec<T>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1).unwrap_or(0);
        let ow = (w + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1).unwrap_or(0);
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    /// Per batch item: `patch_len × (oh·ow)` column matrix.
    cols: Vec<T>,
}

/// 2-D convolution (cross-correlation) with stride, zero padding and dilation.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    /// `out × in × k × k`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialized weights; bias (if any) starts at zero.
    pub fn new<R: Rng>(spec: ConvSpec, bias: bool, gain: f64, rng: &mut R) -> Self {
        let fan_in = spec.patch_len() as f64;
        let weight = Param::normal(spec.out_channels * spec.patch_len(), gain * (2.0 / fan_in).sqrt(), rng);
        let bias = bias.then(|| Param::filled(spec.out_channels, T::zero()));
        Conv2d { spec, weight, bias, cache: None }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let s = &self.spec;
        let p = oh * ow;
        for ci in 0..s.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..s.kernel {
                for kj in 0..s.kernel {
                    let row = (ci * s.kernel + ki) * s.kernel + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let s = &self.spec;
        let p = oh * ow;
        for ci in 0..s.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..s.kernel {
                for kj in 0..s.kernel {
                    let row = (ci * s.kernel + ki) * s.kernel + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let s = self.spec;
        assert_eq!(c, s.in_channels, "conv expects {} input channels", s.in_channels);
        let (oh, ow) = s.output_size(h, w);
        let p = oh * ow;
        let k = s.patch_len();
        let mut out = Tensor::zeros([n, s.out_channels, oh, ow]);
        let keep = pass.caches();
        let mut all_cols = if keep { vec![T::zero(); n * k * p] } else { Vec::new() };
        let mut scratch = if keep { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..n {
            let cols = if keep { &mut all_cols[b * k * p..(b + 1) * k * p] } else { &mut scratch[..] };
            self.im2col(x.item(b), h, w, oh, ow, cols);
            let y = &mut out.data[b * s.out_channels * p..(b + 1) * s.out_channels * p];
            gemm(false, false, s.out_channels, p, k, T::one(), &self.weight.value, cols, T::zero(), y);
            if let Some(bias) = &self.bias {
                for (o, chunk) in y.chunks_exact_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias.value[o]);
                }
            }
        }
        self.cache = keep.then(|| ConvCache { input_shape: x.shape, out_hw: (oh, ow), cols: all_cols });
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let cache = self.cache.as_ref().expect("conv backward without a caching forward pass");
        let [n, _, h, w] = cache.input_shape;
        let (oh, ow) = cache.out_hw;
        let s = self.spec;
        let p = oh * ow;
        let k = s.patch_len();
        assert_eq!(dy.shape, [n, s.out_channels, oh, ow]);
        let mut dx = input_grad.then(|| Tensor::zeros(cache.input_shape));
        let mut dcols = vec![T::zero(); k * p];
        for b in 0..n {
            let cols = &cache.cols[b * k * p..(b + 1) * k * p];
            let g = dy.item(b);
            gemm(false, true, s.out_channels, k, p, T::one(), g, cols, T::one(), &mut self.weight.grad);
            if let Some(bias) = &mut self.bias {
                for (o, chunk) in g.chunks_exact(p).enumerate() {
                    bias.grad[o] += chunk.iter().copied().sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, k, p, s.out_channels, T::one(), &self.weight.value, g, T::zero(), &mut dcols);
                let len = dx.item_len();
                self.col2im(&dcols, h, w, oh, ow, &mut dx.data[b * len..(b + 1) * len]);
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    shape: [usize; 4],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization over `N·H·W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    cache: Option<BnCache<T>>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(channels, T::one()),
            beta: Param::filled(channels, T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
            cache: None,
            batch_stats: false,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.gamma.len());
        let hw = h * w;
        let m = n * hw;
        let mut out = Tensor::zeros(x.shape);
        if pass == Pass::Infer {
            for ch in 0..c {
                let inv = T::one() / (self.running_var[ch] + self.eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        out.data[i] = x.data[i] * scale + shift;
                    }
                }
            }
            self.cache = None;
            self.batch_stats = false;
            return out;
        }
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); c];
        let mf = T::from_usize(m).unwrap();
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                sum += x.data[off..off + hw].iter().copied().sum();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                sq += x.data[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum();
            }
            let var = sq / mf;
            let inv = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data[i] - mean) * inv;
                    xhat[i] = xh;
                    out.data[i] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
            if pass == Pass::Train {
                let mom = self.momentum;
                let unbiased = if m > 1 { var * mf / T::from_usize(m - 1).unwrap() } else { var };
                self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
                self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
            }
        }
        self.cache = Some(BnCache { shape: x.shape, xhat, inv_std });
        self.batch_stats = true;
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batch-norm backward without a caching forward pass");
        debug_assert!(self.batch_stats);
        let [n, c, h, w] = cache.shape;
        assert_eq!(dy.shape, cache.shape);
        let hw = h * w;
        let mf = T::from_usize(n * hw).unwrap();
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy += dy.data[i];
                    sum_dy_xhat += dy.data[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / mf;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx.data[i] = k * (mf * dy.data[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, pass: Pass) -> Tensor<T> {
        if pass.caches() {
            self.active = x.data.iter().map(|v| *v > T::zero()).collect();
        }
        for v in &mut x.data {
            if *v <= T::zero() {
                *v = T::zero();
            }
        }
        x
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.active.len(), dy.data.len(), "relu backward without a caching forward pass");
        let data = dy.data.iter().zip(&self.active).map(|(g, a)| if *a { *g } else { T::zero() }).collect();
        Tensor { shape: dy.shape, data }
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(spec, false, 1.0, rng),
            bn: BatchNorm2d::new(spec.out_channels),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let y = self.conv.forward(x, pass);
        let y = self.bn.forward(&y, pass);
        self.relu.forward(y, pass)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d, input_grad)
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Vec<T>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

/// Fully connected layer on `N×F×1×1` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / in_features as f64).sqrt();
        Linear {
            in_features,
            out_features,
            weight: Param::normal(in_features * out_features, std, rng),
            bias: Param::filled(out_features, T::zero()),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, pass: Pass) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear expects {} features", self.in_features);
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for row in out.data.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            false,
            true,
            n,
            self.out_features,
            self.in_features,
            T::one(),
            &x.data,
            &self.weight.value,
            T::one(),
            &mut out.data,
        );
        self.input = pass.caches().then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("linear backward without a caching forward pass");
        let n = x.batch();
        gemm(
            true,
            false,
            self.out_features,
            self.in_features,
            n,
            T::one(),
            &dy.data,
            &x.data,
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.data.chunks_exact(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += *d;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        gemm(
            false,
            false,
            n,
            self.in_features,
            self.out_features,
            T::one(),
            &dy.data,
            &self.weight.value,
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// One axis of a bilinear resize: output index → (low, high, weight of high).
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let rows = resize_taps(h, out_h);
    let cols = resize_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] back to an `in_h × in_w` grid.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = dy.shape;
    let rows = resize_taps(in_h, out_h);
    let cols = resize_taps(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    for plane in 0..n * c {
        let g = &dy.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dx.data[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[oy * out_w + ox];
                d[y0 * in_w + x0] += v * (T::one() - fy) * (T::one() - fx);
                d[y0 * in_w + x1] += v * (T::one() - fy) * fx;
                d[y1 * in_w + x0] += v * fy * (T::one() - fx);
                d[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape;
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            assert_eq!((p.batch(), p.spatial()), (n, (h, w)), "concat shape mismatch");
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    let [n, c, h, w] = x.shape;
    assert_eq!(sizes.iter().sum::<usize>(), c);
    let mut parts: Vec<Tensor<T>> = sizes.iter().map(|&s| Tensor::zeros([n, s, h, w])).collect();
    for b in 0..n {
        let item = x.item(b);
        let mut off = 0;
        for (p, &s) in parts.iter_mut().zip(sizes) {
            let len = s * h * w;
            p.data[b * len..(b + 1) * len].copy_from_slice(&item[off..off + len]);
            off += len;
        }
    }
    parts
}

/// Spatial mean: `N×C×H×W → N×C×1×1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let hw = T::from_usize(h * w).unwrap();
    let data = x.data.chunks_exact(h * w).map(|plane| plane.iter().copied().sum::<T>() / hw).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = dy.shape;
    let hw = T::from_usize(h * w).unwrap();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in &dy.data {
        data.extend(std::iter::repeat_n(g / hw, h * w));
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// `N×C×1×1 → N×C×H×W` by repetition.
pub fn broadcast_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = x.shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &v in &x.data {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::from_vec([n, c, h, w], data)
}

pub fn broadcast_spatial_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dy.shape;
    let data = dy.data.chunks_exact(h * w).map(|p| p.iter().copied().sum()).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let s = conv.spec;
        let [n, c, h, w] = x.shape;
        let (oh, ow) = s.output_size(h, w);
        let mut out = Tensor::zeros([n, s.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..s.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for ki in 0..s.kernel {
                                for kj in 0..s.kernel {
                                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let wv = conv.weight.value[((o * c + ci) * s.kernel + ki) * s.kernel + kj];
                                        acc += wv * x.data[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((b * s.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for (stride, padding, dilation) in [(1, 1, 1), (2, 1, 1), (1, 6, 2), (2, 2, 2), (1, 0, 1)] {
            let spec = ConvSpec { in_channels: 3, out_channels: 4, kernel: 3, stride, padding, dilation };
            let mut conv = Conv2d::<f64>::new(spec, true, 1.0, &mut r);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random([2, 3, 7, 6], &mut r);
            let fast = conv.forward(&x, Pass::Infer);
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn atrous_padding_six_grows_by_eight() {
        let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, padding: 6, dilation: 2 };
        for n in [1, 2, 4, 9] {
            assert_eq!(spec.output_size(n, n), (n + 8, n + 8));
        }
    }

    /// Central differences of `sum(y * probe)` against the analytic backward pass.
    fn check_grad(
        mut f: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        mut back: impl FnMut(&Tensor<f64>) -> Tensor<f64>,
        x: &Tensor<f64>,
        r: &mut ChaCha8Rng,
    ) {
        let y = f(x);
        let probe = random(y.shape, r);
        let dx = back(&probe);
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let lp: f64 = f(&xp).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut r = rng();
        let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 2, dilation: 2 };
        let conv = Conv2d::<f64>::new(spec, true, 1.0, &mut r);
        let x = random([2, 2, 6, 5], &mut r);
        let mut c1 = conv.clone();
        let mut c2 = conv.clone();
        c2.forward(&x, Pass::Train);
        check_grad(|x| c1.forward(x, Pass::Infer), |d| c2.backward(d, true).unwrap(), &x, &mut r);
    }

    #[test]
    fn batchnorm_input_gradient() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let x = random([3, 3, 2, 2], &mut r);
        let mut b1 = bn.clone();
        let mut b2 = bn.clone();
        b2.forward(&x, Pass::Probe);
        check_grad(|x| b1.forward(x, Pass::Probe), |d| b2.backward(d), &x, &mut r);
    }

    #[test]
    fn linear_and_resize_gradients() {
        let mut r = rng();
        let lin = Linear::<f64>::new(5, 3, 1.0, &mut r);
        let x = random([2, 5, 1, 1], &mut r);
        let mut l1 = lin.clone();
        let mut l2 = lin.clone();
        l2.forward(&x, Pass::Train);
        check_grad(|x| l1.forward(x, Pass::Infer), |d| l2.backward(d), &x, &mut r);

        let x = random([1, 2, 3, 4], &mut r);
        check_grad(|x| resize_bilinear(x, 7, 9), |d| resize_bilinear_backward(d, 3, 4), &x, &mut r);
        check_grad(
            |x| broadcast_spatial(&global_avg_pool(x), 2, 3),
            |d| global_avg_pool_backward(&broadcast_spatial_backward(d), 3, 4),
            &x,
            &mut r,
        );
    }

    #[test]
    fn batchnorm_running_stats_follow_train_passes_only() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = random([4, 2, 3, 3], &mut r);
        bn.forward(&x, Pass::Probe);
        assert_eq!(bn.running_mean, vec![0.0, 0.0]);
        bn.forward(&x, Pass::Train);
        assert_ne!(bn.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn resize_identity_and_concat_split() {
        let mut r = rng();
        let x = random([2, 3, 4, 5], &mut r);
        assert_eq!(resize_bilinear(&x, 4, 5), x);
        let y = random([2, 1, 4, 5], &mut r);
        let cat = concat_channels(&[&x, &y]);
        let parts = split_channels(&cat, &[3, 1]);
        assert_eq!(parts[0], x);
        assert_eq!(parts[1], y);
    }
}
