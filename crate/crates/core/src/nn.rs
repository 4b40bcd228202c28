//! Layer primitives with hand-written backward passes.
//!
//! Parameters of a network component live in one flat [`ParamStore`]; layers
//! only remember the ranges they own. Gradients use a buffer of the same
//! length, so the optimizer and the checkpoint code never see layer structure.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::{gemm, Batch, Real};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter segments packed into one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub segments: Vec<Segment>,
    pub values: Vec<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            segments: Vec::new(),
            values: Vec::new(),
        }
    }
}

pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Range<usize> {
        let offset = self.values.len();
        let seg = Segment {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        };
        let n = seg.len();
        match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.values
                    .extend((0..n).map(|_| T::of(rng.random_range(-bound..bound))));
            }
            Init::Const(v) => self.values.extend(std::iter::repeat_n(T::of(v), n)),
        }
        self.segments.push(seg);
        offset..offset + n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.values.len()]
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[T]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    /// Same layout (names, shapes, offsets) as `other`.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments == other.segments && self.values.len() == other.values.len()
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            &format!("{prefix}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::FanIn(fan_in),
            rng,
        );
        let bias = store.add(&format!("{prefix}.bias"), &[out_c], Init::FanIn(fan_in), rng);
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.stride == 0 {
            bail!(Config, "convolution stride must be positive");
        }
        if self.kernel > hp || self.kernel > wp {
            bail!(Shape, "kernel {} larger than input extent {hp}x{wp}", self.kernel);
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Output columns `ox` whose input column `ox·s + kx − p` lies in `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx {
            ((w + p - kx - 1) / s + 1).min(wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, x: &Batch<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ncols = x.n * ho * wo;
        let mut cols = vec![T::zero(); self.rows() * ncols];
        for ci in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kx, x.w, wo);
                    for b in 0..x.n {
                        let src = &x.data[(ci * x.n + b) * x.h * x.w..][..x.h * x.w];
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= x.h {
                                continue;
                            }
                            let src_row = &src[(iy - p) * x.w..][..x.w];
                            let dst_row = &mut dst[(b * ho + oy) * wo..][..wo];
                            let start = lo * s + kx - p;
                            if s == 1 {
                                dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                            } else {
                                for (d, v) in dst_row[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Batch<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ncols = n * ho * wo;
        let mut dx = Batch::zeros(self.in_c, n, h, w);
        for ci in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for b in 0..n {
                        let dst = &mut dx.data[(ci * n + b) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let dst_row = &mut dst[(iy - p) * w..][..w];
                            let src_row = &src[(b * ho + oy) * wo..][..wo];
                            let start = lo * s + kx - p;
                            for (d, v) in dst_row[start..].iter_mut().step_by(s).zip(&src_row[lo..hi]) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by [`Conv2d::backward`].
    pub fn forward<T: Real>(&self, params: &[T], x: &Batch<T>) -> Result<(Batch<T>, Vec<T>)> {
        if x.c != self.in_c {
            bail!(Shape, "convolution expects {} channels, got {}", self.in_c, x.c);
        }
        let (ho, wo) = self.out_hw(x.h, x.w)?;
        let cols = self.im2col(x, ho, wo);
        let ncols = x.n * ho * wo;
        let mut out = Batch::zeros(self.out_c, x.n, ho, wo);
        let bias = &params[self.bias.clone()];
        for (co, chunk) in out.data.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            self.out_c,
            self.rows(),
            ncols,
            &params[self.weight.clone()],
            false,
            &cols,
            false,
            &mut out.data,
            true,
        );
        Ok((out, cols))
    }

    /// Accumulates weight and bias gradients; returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        input_hw: (usize, usize),
        cols: &[T],
        dy: &Batch<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Batch<T>> {
        let ncols = dy.n * dy.h * dy.w;
        let rows = self.rows();
        gemm(
            self.out_c,
            ncols,
            rows,
            &dy.data,
            false,
            cols,
            true,
            &mut grads[self.weight.clone()],
            true,
        );
        for (co, g) in grads[self.bias.clone()].iter_mut().enumerate() {
            *g += dy.data[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * ncols];
        gemm(
            rows,
            self.out_c,
            ncols,
            &params[self.weight.clone()],
            true,
            &dy.data,
            false,
            &mut dcols,
            false,
        );
        Some(self.col2im(&dcols, dy.n, input_hw.0, input_hw.1, dy.h, dy.w))
    }
}

// ---------------------------------------------------------------------------
// Group normalization (per sample, so batch composition never leaks across items)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            bail!(Config, "{channels} channels cannot be split into {groups} groups");
        }
        let gamma = store.add(&format!("{prefix}.gamma"), &[channels], Init::Const(1.0), rng);
        let beta = store.add(&format!("{prefix}.beta"), &[channels], Init::Const(0.0), rng);
        Ok(GroupNorm {
            channels,
            groups,
            gamma,
            beta,
        })
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Batch<T>) -> (Batch<T>, NormCache<T>) {
        let cpg = self.channels / self.groups;
        let hw = x.plane();
        let m = T::of((cpg * hw) as f64);
        let eps = T::of(NORM_EPS);
        let gamma = &params[self.gamma.clone()];
        let beta = &params[self.beta.clone()];
        let mut y = x.clone();
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); x.n * self.groups];
        for b in 0..x.n {
            for g in 0..self.groups {
                let chans = g * cpg..(g + 1) * cpg;
                let slice = |c: usize| (c * x.n + b) * hw..(c * x.n + b + 1) * hw;
                let mut mean = T::zero();
                for c in chans.clone() {
                    mean += x.data[slice(c)].iter().copied().sum::<T>();
                }
                mean = mean / m;
                let mut var = T::zero();
                for c in chans.clone() {
                    for &v in &x.data[slice(c)] {
                        var += (v - mean) * (v - mean);
                    }
                }
                var = var / m;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[b * self.groups + g] = istd;
                for c in chans {
                    for i in slice(c) {
                        let xh = (x.data[i] - mean) * istd;
                        xhat[i] = xh;
                        y.data[i] = gamma[c] * xh + beta[c];
                    }
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(&self, params: &[T], cache: &NormCache<T>, dy: &Batch<T>, grads: &mut [T]) -> Batch<T> {
        let cpg = self.channels / self.groups;
        let hw = dy.plane();
        let m = T::of((cpg * hw) as f64);
        let gamma = &params[self.gamma.clone()];
        let mut dx = Batch::zeros(dy.c, dy.n, dy.h, dy.w);
        let (g0, b0) = (self.gamma.start, self.beta.start);
        for b in 0..dy.n {
            for g in 0..self.groups {
                let chans = g * cpg..(g + 1) * cpg;
                let slice = |c: usize| (c * dy.n + b) * hw..(c * dy.n + b + 1) * hw;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for c in chans.clone() {
                    let mut dgamma = T::zero();
                    let mut dbeta = T::zero();
                    for i in slice(c) {
                        let d = dy.data[i];
                        dgamma += d * cache.xhat[i];
                        dbeta += d;
                        let dxh = d * gamma[c];
                        sum_d += dxh;
                        sum_dx += dxh * cache.xhat[i];
                    }
                    grads[g0 + c] += dgamma;
                    grads[b0 + c] += dbeta;
                }
                let istd = cache.inv_std[b * self.groups + g];
                for c in chans {
                    for i in slice(c) {
                        let dxh = dy.data[i] * gamma[c];
                        dx.data[i] = istd / m * (m * dxh - sum_d - cache.xhat[i] * sum_dx);
                    }
                }
            }
        }
        dx
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the positive entries of the forward output.
pub fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// Dense layers over row-major `N×D` matrices
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            &format!("{prefix}.weight"),
            &[out_dim, in_dim],
            Init::FanIn(in_dim),
            rng,
        );
        let bias = store.add(&format!("{prefix}.bias"), &[out_dim], Init::FanIn(in_dim), rng);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let bias = &params[self.bias.clone()];
        let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            x,
            false,
            &params[self.weight.clone()],
            true,
            &mut y,
            true,
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        dy: &[T],
        n: usize,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        gemm(
            self.out_dim,
            n,
            self.in_dim,
            dy,
            true,
            x,
            false,
            &mut grads[self.weight.clone()],
            true,
        );
        let gb = &mut grads[self.bias.clone()];
        for row in dy.chunks(self.out_dim) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); n * self.in_dim];
        gemm(
            n,
            self.out_dim,
            self.in_dim,
            dy,
            false,
            &params[self.weight.clone()],
            false,
            &mut dx,
            false,
        );
        Some(dx)
    }
}

/// Layer normalization over the features of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowNorm {
    pub dim: usize,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

impl RowNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let gamma = store.add(&format!("{prefix}.gamma"), &[dim], Init::Const(1.0), rng);
        let beta = store.add(&format!("{prefix}.beta"), &[dim], Init::Const(0.0), rng);
        RowNorm { dim, gamma, beta }
    }

    fn as_group(&self) -> GroupNorm {
        GroupNorm {
            channels: self.dim,
            groups: 1,
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
        }
    }

    // Rows of an `N×D` matrix are a `D×N×1×1` batch once transposed; the
    // transposes are cheap next to the surrounding matrix products.
    fn to_batch<T: Real>(&self, x: &[T], n: usize) -> Batch<T> {
        let mut b = Batch::zeros(self.dim, n, 1, 1);
        for i in 0..n {
            for d in 0..self.dim {
                b.data[d * n + i] = x[i * self.dim + d];
            }
        }
        b
    }

    fn rows_of<T: Real>(&self, b: &Batch<T>) -> Vec<T> {
        let n = b.n;
        let mut x = vec![T::zero(); n * self.dim];
        for i in 0..n {
            for d in 0..self.dim {
                x[i * self.dim + d] = b.data[d * n + i];
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
        let (y, cache) = self.as_group().forward(params, &self.to_batch(x, n));
        (self.rows_of(&y), cache)
    }

    pub fn backward<T: Real>(&self, params: &[T], cache: &NormCache<T>, dy: &[T], n: usize, grads: &mut [T]) -> Vec<T> {
        let dx = self.as_group().backward(params, cache, &self.to_batch(dy, n), grads);
        self.rows_of(&dx)
    }
}

/// `C×N×H×W` batch → `N×(C·H·W)` rows, each row in `(c, h, w)` order.
pub fn batch_to_rows<T: Real>(x: &Batch<T>) -> Vec<T> {
    let hw = x.plane();
    let d = x.c * hw;
    let mut rows = vec![T::zero(); x.n * d];
    for c in 0..x.c {
        for b in 0..x.n {
            rows[b * d + c * hw..b * d + (c + 1) * hw]
                .copy_from_slice(&x.data[(c * x.n + b) * hw..(c * x.n + b + 1) * hw]);
        }
    }
    rows
}

pub fn rows_to_batch<T: Real>(rows: &[T], c: usize, n: usize, h: usize, w: usize) -> Batch<T> {
    let hw = h * w;
    let d = c * hw;
    let mut x = Batch::zeros(c, n, h, w);
    for ch in 0..c {
        for b in 0..n {
            x.data[(ch * n + b) * hw..(ch * n + b + 1) * hw]
                .copy_from_slice(&rows[b * d + ch * hw..b * d + (ch + 1) * hw]);
        }
    }
    x
}
