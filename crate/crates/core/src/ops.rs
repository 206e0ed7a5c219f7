//! Dense CPU kernels with hand-written backward passes.
//!
//! Convolution is expressed per output channel: the caller supplies, for
//! every channel, which filter (weights + optional bias) produces it, and
//! receives the weight gradient of every channel back through a callback.
//! That is the hook the multi-domain model uses to route channels between
//! the shared store and a domain's overlay.

use crate::archspec::{Activation, ConvLayerSpec};
use crate::scalar::Scalar;

/// Dense `N×C×H×W` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Geometry of one convolution, copied out of a [`ConvLayerSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl From<&ConvLayerSpec> for ConvGeom {
    fn from(l: &ConvLayerSpec) -> Self {
        Self {
            in_c: l.in_channels,
            out_c: l.out_channels,
            kh: l.kernel_h,
            kw: l.kernel_w,
            groups: l.groups,
            stride: l.stride,
            padding: l.padding,
        }
    }
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn filter_len(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kh) / self.stride + 1,
            (w + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    /// Output positions `o` with `o*stride + k - padding` inside `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if len + self.padding > k {
            ((len + self.padding - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `out[i] += w · src[i]`.
#[inline]
fn axpy<T: Scalar>(out: &mut [T], w: T, src: &[T]) {
    for (o, &v) in out.iter_mut().zip(src) {
        *o += w * v;
    }
}

/// `Σ a[i] · b[i]`, accumulated left to right.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Unfolds input channels `ic0..ic0 + in_per_group` of sample `n` into
/// `cols`, a `(in_per_group·kh·kw) × (oh·ow)` row-major matrix whose row
/// `(ic, ky, kx)` holds the input value under that tap for every output
/// position (zero where the tap falls into the padding).
fn im2col<T: Scalar>(x: &Tensor4<T>, n: usize, ic0: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let p = oh * ow;
    let mut k = 0;
    for ic in 0..g.in_per_group() {
        let input = x.channel(n, ic0 + ic);
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, x.h, oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, x.w, ow);
                let row = &mut cols[k * p..(k + 1) * p];
                row.iter_mut().for_each(|v| *v = T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let in_row = &input[iy * x.w..(iy + 1) * x.w];
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        out_row[ox] = in_row[ox * g.stride + kx - g.padding];
                    }
                }
                k += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds every entry of `cols` back onto the input
/// position it was read from.
fn col2im<T: Scalar>(cols: &[T], dx: &mut Tensor4<T>, n: usize, ic0: usize, g: &ConvGeom, oh: usize, ow: usize) {
    let p = oh * ow;
    let (h, w) = (dx.h, dx.w);
    let mut k = 0;
    for ic in 0..g.in_per_group() {
        let grad_in = dx.channel_mut(n, ic0 + ic);
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_range(ky, h, oh);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_range(kx, w, ow);
                let row = &cols[k * p..(k + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let in_row = &mut grad_in[iy * w..(iy + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        in_row[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
                k += 1;
            }
        }
    }
}

/// Filter weights (`in_per_group × kh × kw`) and optional bias of one
/// output channel.
pub type FilterRef<'a, T> = (&'a [T], Option<T>);

/// 2-D convolution where every output channel reads its filter through
/// `filter(oc)`, so callers can route channels to different weight stores.
pub fn conv2d_forward<'a, T: Scalar>(
    x: &Tensor4<T>,
    g: &ConvGeom,
    filter: impl Fn(usize) -> FilterRef<'a, T>,
) -> Tensor4<T> {
    assert_eq!(x.c, g.in_c, "conv input channels");
    let (oh, ow) = g.output_hw(x.h, x.w);
    let p = oh * ow;
    let k_len = g.filter_len();
    let out_per_group = g.out_c / g.groups;
    let mut y = Tensor4::zeros(x.n, g.out_c, oh, ow);
    let mut cols = vec![T::zero(); k_len * p];
    for n in 0..x.n {
        for grp in 0..g.groups {
            im2col(x, n, grp * g.in_per_group(), g, oh, ow, &mut cols);
            for oc in grp * out_per_group..(grp + 1) * out_per_group {
                let (weights, bias) = filter(oc);
                debug_assert_eq!(weights.len(), k_len);
                let out = y.channel_mut(n, oc);
                if let Some(b) = bias {
                    out.iter_mut().for_each(|v| *v = b);
                }
                for (k, &wv) in weights.iter().enumerate() {
                    axpy(out, wv, &cols[k * p..(k + 1) * p]);
                }
            }
        }
    }
    y
}

/// Backward of [`conv2d_forward`]. Calls `filter_grad(oc, dw, db)` once per
/// output channel (with `db` present iff the filter has a bias) and returns
/// the input gradient when `need_dx` is set.
pub fn conv2d_backward<'a, T: Scalar>(
    x: &Tensor4<T>,
    g: &ConvGeom,
    dy: &Tensor4<T>,
    filter: impl Fn(usize) -> FilterRef<'a, T>,
    mut filter_grad: impl FnMut(usize, &[T], Option<T>),
    need_dx: bool,
) -> Option<Tensor4<T>> {
    let (oh, ow) = (dy.h, dy.w);
    let p = oh * ow;
    let k_len = g.filter_len();
    let out_per_group = g.out_c / g.groups;
    let mut dx = need_dx.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
    let mut dw = vec![T::zero(); g.out_c * k_len];
    let mut db = vec![T::zero(); g.out_c];
    let mut cols = vec![T::zero(); k_len * p];
    let mut dcols = vec![T::zero(); if need_dx { k_len * p } else { 0 }];
    for n in 0..x.n {
        for grp in 0..g.groups {
            let ic0 = grp * g.in_per_group();
            im2col(x, n, ic0, g, oh, ow, &mut cols);
            dcols.iter_mut().for_each(|v| *v = T::zero());
            for oc in grp * out_per_group..(grp + 1) * out_per_group {
                let (weights, bias) = filter(oc);
                let grad_out = dy.channel(n, oc);
                if bias.is_some() {
                    db[oc] += grad_out.iter().copied().sum::<T>();
                }
                let dw_oc = &mut dw[oc * k_len..(oc + 1) * k_len];
                for k in 0..k_len {
                    let col = &cols[k * p..(k + 1) * p];
                    dw_oc[k] += dot(grad_out, col);
                }
                if need_dx {
                    for (k, &wv) in weights.iter().enumerate() {
                        axpy(&mut dcols[k * p..(k + 1) * p], wv, grad_out);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                col2im(&dcols, dx, n, ic0, g, oh, ow);
            }
        }
    }
    for oc in 0..g.out_c {
        let (_, bias) = filter(oc);
        filter_grad(oc, &dw[oc * k_len..(oc + 1) * k_len], bias.map(|_| db[oc]));
    }
    dx
}

/// Running mean and variance of one BN layer. Buffers, not parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> RunningStats<T> {
    pub fn reset(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<T>) {
        let momentum = T::lit(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = keep * self.var[c] + momentum * batch.unbiased_var[c];
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

/// Values kept from a training-mode BN forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode BN: normalizes with batch statistics and returns them so
/// the caller can fold them into its running averages.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor4<T>,
    scale: &[T],
    bias: &[T],
) -> (Tensor4<T>, BatchNormCache<T>, BatchStats<T>) {
    let count = x.n * x.plane();
    let m = T::from_usize_lossy(count);
    let eps = T::lit(BN_EPS);
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut x_hat = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut inv_std = vec![T::zero(); x.c];
    let mut stats = BatchStats {
        mean: vec![T::zero(); x.c],
        unbiased_var: vec![T::zero(); x.c],
    };
    for c in 0..x.c {
        let mut sum = T::zero();
        for n in 0..x.n {
            sum += x.channel(n, c).iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for n in 0..x.n {
            sq += x.channel(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / m;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        for n in 0..x.n {
            let src = x.channel(n, c);
            let xh = x_hat.channel_mut(n, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mean) * istd;
            }
            let xh = x_hat.channel(n, c);
            let out = y.channel_mut(n, c);
            for (o, &v) in out.iter_mut().zip(xh) {
                *o = scale[c] * v + bias[c];
            }
        }
        stats.mean[c] = mean;
        stats.unbiased_var[c] = if count > 1 {
            sq / T::from_usize_lossy(count - 1)
        } else {
            var
        };
    }
    (y, BatchNormCache { x_hat, inv_std }, stats)
}

/// Evaluation-mode BN with frozen running statistics.
pub fn batch_norm_eval<T: Scalar>(x: &Tensor4<T>, scale: &[T], bias: &[T], stats: &RunningStats<T>) -> Tensor4<T> {
    let eps = T::lit(BN_EPS);
    let mut y = x.clone();
    for c in 0..x.c {
        let istd = T::one() / (stats.var[c] + eps).sqrt();
        let a = scale[c] * istd;
        let b = bias[c] - a * stats.mean[c];
        for n in 0..x.n {
            y.channel_mut(n, c).iter_mut().for_each(|v| *v = a * *v + b);
        }
    }
    y
}

/// Returns `(dx, dscale, dbias)`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor4<T>,
    scale: &[T],
    cache: &BatchNormCache<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize_lossy(dy.n * dy.plane());
    let mut dx = Tensor4::zeros(dy.n, dy.c, dy.h, dy.w);
    let mut dscale = vec![T::zero(); dy.c];
    let mut dbias = vec![T::zero(); dy.c];
    for c in 0..dy.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for n in 0..dy.n {
            for (&g, &xh) in dy.channel(n, c).iter().zip(cache.x_hat.channel(n, c)) {
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        dscale[c] = sum_dy_xh;
        dbias[c] = sum_dy;
        let k = scale[c] * cache.inv_std[c] / m;
        for n in 0..dy.n {
            let xh = cache.x_hat.channel(n, c);
            let g = dy.channel(n, c);
            let out = dx.channel_mut(n, c);
            for i in 0..out.len() {
                out[i] = k * (m * g[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    (dx, dscale, dbias)
}

pub fn activate<T: Scalar>(act: Activation, x: &mut Tensor4<T>) {
    let six = T::lit(6.0);
    match act {
        Activation::Identity => {}
        Activation::Relu => x.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Relu6 => x.data.iter_mut().for_each(|v| *v = v.max(T::zero()).min(six)),
    }
}

/// Gradient through an activation given its pre-activation input.
pub fn activate_backward<T: Scalar>(act: Activation, pre: &Tensor4<T>, dy: &mut Tensor4<T>) {
    let six = T::lit(6.0);
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &p) in dy.data.iter_mut().zip(&pre.data) {
                if p <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Relu6 => {
            for (g, &p) in dy.data.iter_mut().zip(&pre.data) {
                if p <= T::zero() || p >= six {
                    *g = T::zero();
                }
            }
        }
    }
}

/// `N×C×H×W -> N×C` mean over spatial positions.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let p = T::from_usize_lossy(x.plane());
    let mut out = Vec::with_capacity(x.n * x.c);
    for n in 0..x.n {
        for c in 0..x.c {
            out.push(x.channel(n, c).iter().copied().sum::<T>() / p);
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(d: &[T], n: usize, c: usize, h: usize, w: usize) -> Tensor4<T> {
    let p = T::from_usize_lossy(h * w);
    let mut dx = Tensor4::zeros(n, c, h, w);
    for i in 0..n {
        for j in 0..c {
            let g = d[i * c + j] / p;
            dx.channel_mut(i, j).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

/// `logits[n, k] = Σ_c weight[k, c]·features[n, c] + bias[k]`.
pub fn linear<T: Scalar>(features: &[T], in_f: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let out_f = bias.len();
    let n = features.len() / in_f;
    let mut out = Vec::with_capacity(n * out_f);
    for row in features.chunks(in_f) {
        for k in 0..out_f {
            let w = &weight[k * in_f..(k + 1) * in_f];
            out.push(bias[k] + w.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>());
        }
    }
    out
}

/// Returns `(dfeatures, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    features: &[T],
    in_f: usize,
    weight: &[T],
    dlogits: &[T],
    out_f: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dfeat = vec![T::zero(); features.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); out_f];
    for (i, row) in features.chunks(in_f).enumerate() {
        for k in 0..out_f {
            let g = dlogits[i * out_f + k];
            db[k] += g;
            let wrow = &weight[k * in_f..(k + 1) * in_f];
            let dwrow = &mut dw[k * in_f..(k + 1) * in_f];
            for c in 0..in_f {
                dwrow[c] += g * row[c];
                dfeat[i * in_f + c] += g * wrow[c];
            }
        }
    }
    (dfeat, dw, db)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> (T, Vec<T>) {
    let n = labels.len();
    let nt = T::from_usize_lossy(n);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (i, row) in logits.chunks(classes).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[labels[i]];
        for k in 0..classes {
            let p = (row[k] - log_denom).exp();
            let target = if k == labels[i] { T::one() } else { T::zero() };
            grad[i * classes + k] = (p - target) / nt;
        }
    }
    (loss / nt, grad)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
