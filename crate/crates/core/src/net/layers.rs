//! Convolution blocks and the parameter-free operators of the U-Net, each with an
//! exact backward pass. Every backward accumulates (`+=`) into parameter gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor5D};
use crate::error::{domain, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param { name: name.into(), shape: shape.to_vec(), data: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.data {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// He-uniform bound for ReLU-followed layers.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Unit-gain fan-in bound for linear layers.
pub fn unit_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    let mut s = xr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
    for a in acc {
        s = s + a;
    }
    s
}

/// Source x-range for tap `k` of a width-3 kernel over `n` samples: output
/// `[lo, hi)` reads input `[lo + k - 1, hi + k - 1)`.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// One (y, x) plane: `out += w * shift(src, ky, kx)` with zero padding.
#[inline]
fn plane_tap<T: Real>(w: T, src: &[T], out: &mut [T], ny: usize, nx: usize, ky: usize, kx: usize) {
    let (ylo, yhi) = tap_range(ky, ny);
    let (xlo, xhi) = tap_range(kx, nx);
    if xhi <= xlo {
        return;
    }
    for y in ylo..yhi {
        let sy = y + ky - 1;
        let o = y * nx;
        let s = sy * nx + xlo + kx - 1;
        axpy(w, &src[s..s + xhi - xlo], &mut out[o + xlo..o + xhi]);
    }
}

/// Adjoint of `plane_tap`: `grad_src += w * unshift(g)`.
#[inline]
fn plane_tap_adj<T: Real>(w: T, g: &[T], gsrc: &mut [T], ny: usize, nx: usize, ky: usize, kx: usize) {
    let (ylo, yhi) = tap_range(ky, ny);
    let (xlo, xhi) = tap_range(kx, nx);
    if xhi <= xlo {
        return;
    }
    for y in ylo..yhi {
        let sy = y + ky - 1;
        let o = y * nx;
        let s = sy * nx + xlo + kx - 1;
        axpy(w, &g[o + xlo..o + xhi], &mut gsrc[s..s + xhi - xlo]);
    }
}

#[inline]
fn plane_tap_dot<T: Real>(g: &[T], src: &[T], ny: usize, nx: usize, ky: usize, kx: usize) -> T {
    let (ylo, yhi) = tap_range(ky, ny);
    let (xlo, xhi) = tap_range(kx, nx);
    if xhi <= xlo {
        return T::zero();
    }
    let mut acc = T::zero();
    for y in ylo..yhi {
        let sy = y + ky - 1;
        let o = y * nx;
        let s = sy * nx + xlo + kx - 1;
        acc = acc + dot(&g[o + xlo..o + xhi], &src[s..s + xhi - xlo]);
    }
    acc
}

/// `out[x] += a * s[x - 1] + b * s[x] + c * s[x + 1]`, zero outside the row.
#[inline]
fn row3<T: Real>(a: T, b: T, c: T, s: &[T], out: &mut [T]) {
    let n = s.len();
    if n == 1 {
        out[0] = out[0] + b * s[0];
        return;
    }
    out[0] = out[0] + b * s[0] + c * s[1];
    out[n - 1] = out[n - 1] + a * s[n - 2] + b * s[n - 1];
    for (((o, &l), &m), &r) in out[1..n - 1].iter_mut().zip(&s[..n - 2]).zip(&s[1..n - 1]).zip(&s[2..]) {
        *o = *o + a * l + b * m + c * r;
    }
}

/// Rows of one plane shifted by `ky`: `(out row, source row)` pairs.
#[inline]
fn row_pairs(ny: usize, ky: usize) -> impl Iterator<Item = (usize, usize)> {
    let (lo, hi) = tap_range(ky, ny);
    (lo..hi).map(move |y| (y, y + ky - 1))
}

/// All three x taps of kernel row `ky` over one plane.
#[inline]
fn plane_row3<T: Real>(w: &[T], src: &[T], out: &mut [T], ny: usize, nx: usize, ky: usize) {
    for (y, sy) in row_pairs(ny, ky) {
        row3(w[0], w[1], w[2], &src[sy * nx..(sy + 1) * nx], &mut out[y * nx..(y + 1) * nx]);
    }
}

#[inline]
fn plane_row3_adj<T: Real>(w: &[T], g: &[T], gsrc: &mut [T], ny: usize, nx: usize, ky: usize) {
    for (y, sy) in row_pairs(ny, ky) {
        row3(w[2], w[1], w[0], &g[y * nx..(y + 1) * nx], &mut gsrc[sy * nx..(sy + 1) * nx]);
    }
}

/// Weight gradients of the three x taps of kernel row `ky`.
#[inline]
fn plane_row3_dot<T: Real>(g: &[T], src: &[T], acc: &mut [T], ny: usize, nx: usize, ky: usize) {
    for (y, sy) in row_pairs(ny, ky) {
        let (gr, sr) = (&g[y * nx..(y + 1) * nx], &src[sy * nx..(sy + 1) * nx]);
        if nx > 1 {
            acc[0] = acc[0] + dot(&gr[1..], &sr[..nx - 1]);
            acc[2] = acc[2] + dot(&gr[..nx - 1], &sr[1..]);
        }
        acc[1] = acc[1] + dot(gr, sr);
    }
}

/// 3x3 convolution in the x-y plane, zero padded. `w` is (c_out, c_in, 3, 3).
pub fn conv_xy<T: Real>(x: &Tensor5D<T>, w: &[T], b: &[T], c_out: usize) -> Tensor5D<T> {
    let [c_in, nt, nz, ny, nx] = x.dims;
    let vol = x.volume();
    let plane = ny * nx;
    let mut out = Tensor5D::zeros([c_out, nt, nz, ny, nx]);
    out.data.par_chunks_mut(vol).enumerate().for_each(|(co, oc)| {
        oc.iter_mut().for_each(|v| *v = b[co]);
        for p in 0..nt * nz {
            let op = &mut oc[p * plane..(p + 1) * plane];
            for ci in 0..c_in {
                let xp = &x.channel(ci)[p * plane..(p + 1) * plane];
                let wc = &w[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                for ky in 0..3 {
                    plane_row3(&wc[ky * 3..ky * 3 + 3], xp, op, ny, nx, ky);
                }
            }
        }
    });
    out
}

/// Returns the input gradient; adds into `gw`, `gb` when given.
pub fn conv_xy_backward<T: Real>(
    x: &Tensor5D<T>,
    g: &Tensor5D<T>,
    w: &[T],
    grads: Option<(&mut [T], &mut [T])>,
) -> Tensor5D<T> {
    let [c_in, nt, nz, ny, nx] = x.dims;
    let c_out = g.dims[0];
    let vol = x.volume();
    let plane = ny * nx;
    let mut gi = Tensor5D::zeros(x.dims);
    gi.data.par_chunks_mut(vol).enumerate().for_each(|(ci, gc)| {
        for p in 0..nt * nz {
            let gp = &mut gc[p * plane..(p + 1) * plane];
            for co in 0..c_out {
                let gop = &g.channel(co)[p * plane..(p + 1) * plane];
                let wc = &w[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                for ky in 0..3 {
                    plane_row3_adj(&wc[ky * 3..ky * 3 + 3], gop, gp, ny, nx, ky);
                }
            }
        }
    });
    if let Some((gw, gb)) = grads {
        gw.par_chunks_mut(c_in * 9).zip(gb.par_iter_mut()).enumerate().for_each(|(co, (gwc, gbc))| {
            let gco = g.channel(co);
            *gbc = *gbc + gco.iter().copied().sum::<T>();
            for p in 0..nt * nz {
                let gp = &gco[p * plane..(p + 1) * plane];
                for ci in 0..c_in {
                    let xp = &x.channel(ci)[p * plane..(p + 1) * plane];
                    for ky in 0..3 {
                        plane_row3_dot(gp, xp, &mut gwc[ci * 9 + ky * 3..ci * 9 + ky * 3 + 3], ny, nx, ky);
                    }
                }
            }
        });
    }
    gi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Z,
    T,
}

/// (outer count, axis length, inner contiguous length) per channel.
fn axis_layout(dims: [usize; 5], axis: Axis) -> (usize, usize, usize) {
    let [_, nt, nz, ny, nx] = dims;
    match axis {
        Axis::Z => (nt, nz, ny * nx),
        Axis::T => (1, nt, nz * ny * nx),
    }
}

/// Source index for tap `k` at position `i`; t wraps, z is zero padded.
#[inline]
fn axis_src(i: usize, k: usize, n: usize, axis: Axis) -> Option<usize> {
    let s = i as isize + k as isize - 1;
    match axis {
        Axis::T => Some(s.rem_euclid(n as isize) as usize),
        Axis::Z => (s >= 0 && s < n as isize).then_some(s as usize),
    }
}

/// Width-3 convolution along z (zero padded) or t (circular). `w` is (c_out, c_in, 3).
pub fn conv_axis<T: Real>(x: &Tensor5D<T>, w: &[T], b: &[T], c_out: usize, axis: Axis) -> Tensor5D<T> {
    let c_in = x.dims[0];
    let vol = x.volume();
    let (outer, n, inner) = axis_layout(x.dims, axis);
    let mut out = Tensor5D::zeros([c_out, x.dims[1], x.dims[2], x.dims[3], x.dims[4]]);
    out.data.par_chunks_mut(vol).enumerate().for_each(|(co, oc)| {
        oc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xc = x.channel(ci);
            for k in 0..3 {
                let wv = w[(co * c_in + ci) * 3 + k];
                for o in 0..outer {
                    for i in 0..n {
                        if let Some(s) = axis_src(i, k, n, axis) {
                            let d = (o * n + i) * inner;
                            let s = (o * n + s) * inner;
                            axpy(wv, &xc[s..s + inner], &mut oc[d..d + inner]);
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_axis_backward<T: Real>(
    x: &Tensor5D<T>,
    g: &Tensor5D<T>,
    w: &[T],
    axis: Axis,
    grads: Option<(&mut [T], &mut [T])>,
) -> Tensor5D<T> {
    let c_in = x.dims[0];
    let c_out = g.dims[0];
    let vol = x.volume();
    let (outer, n, inner) = axis_layout(x.dims, axis);
    let mut gi = Tensor5D::zeros(x.dims);
    gi.data.par_chunks_mut(vol).enumerate().for_each(|(ci, gc)| {
        for co in 0..c_out {
            let gco = g.channel(co);
            for k in 0..3 {
                let wv = w[(co * c_in + ci) * 3 + k];
                for o in 0..outer {
                    for i in 0..n {
                        if let Some(s) = axis_src(i, k, n, axis) {
                            let d = (o * n + i) * inner;
                            let s = (o * n + s) * inner;
                            axpy(wv, &gco[d..d + inner], &mut gc[s..s + inner]);
                        }
                    }
                }
            }
        }
    });
    if let Some((gw, gb)) = grads {
        gw.par_chunks_mut(c_in * 3).zip(gb.par_iter_mut()).enumerate().for_each(|(co, (gwc, gbc))| {
            let gco = g.channel(co);
            *gbc = *gbc + gco.iter().copied().sum::<T>();
            for ci in 0..c_in {
                let xc = x.channel(ci);
                for k in 0..3 {
                    let mut acc = T::zero();
                    for o in 0..outer {
                        for i in 0..n {
                            if let Some(s) = axis_src(i, k, n, axis) {
                                let d = (o * n + i) * inner;
                                let s = (o * n + s) * inner;
                                acc = acc + dot(&gco[d..d + inner], &xc[s..s + inner]);
                            }
                        }
                    }
                    gwc[ci * 3 + k] = gwc[ci * 3 + k] + acc;
                }
            }
        });
    }
    gi
}

/// Separable 4D convolution: 3x3 in x-y (c_in to c_out), then 3 along z and 3 along t
/// (both c_out to c_out). No activation inside the block.
#[derive(Debug, Clone, PartialEq)]
pub struct SepConv4DBlock<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub w_xy: Param<T>,
    pub b_xy: Param<T>,
    pub w_z: Param<T>,
    pub b_z: Param<T>,
    pub w_t: Param<T>,
    pub b_t: Param<T>,
    /// Bypass the z sub-convolution.
    pub skip_z: bool,
    /// Keep w_z and b_z out of gradient accumulation.
    pub frozen_z: bool,
}

#[derive(Debug, Clone)]
pub struct SepCache<T> {
    input: Tensor5D<T>,
    h_xy: Tensor5D<T>,
    h_z: Option<Tensor5D<T>>,
}

impl<T: Real> SepConv4DBlock<T> {
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        SepConv4DBlock {
            c_in,
            c_out,
            w_xy: Param::zeros(format!("{name}.w_xy"), &[c_out, c_in, 3, 3]),
            b_xy: Param::zeros(format!("{name}.b_xy"), &[c_out]),
            w_z: Param::zeros(format!("{name}.w_z"), &[c_out, c_out, 3]),
            b_z: Param::zeros(format!("{name}.b_z"), &[c_out]),
            w_t: Param::zeros(format!("{name}.w_t"), &[c_out, c_out, 3]),
            b_t: Param::zeros(format!("{name}.b_t"), &[c_out]),
            skip_z: false,
            frozen_z: false,
        }
    }

    /// He-uniform on the x-y kernel, unit-gain fan-in uniform on the t kernel, the
    /// identity on the z kernel, zero biases. Un-skipping an identity z conv leaves
    /// the block unchanged, so stage II starts from the stage I function.
    pub fn init(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(name, c_in, c_out);
        b.w_xy = Param::uniform(format!("{name}.w_xy"), &[c_out, c_in, 3, 3], he_bound(9 * c_in), rng);
        b.w_t = Param::uniform(format!("{name}.w_t"), &[c_out, c_out, 3], unit_bound(3 * c_out), rng);
        for i in 0..c_out {
            b.w_z.data[(i * c_out + i) * 3 + 1] = T::one();
        }
        b
    }

    /// Centre taps 1 on the channel diagonal: the block is the identity when c_in == c_out.
    pub fn identity(name: &str, c: usize) -> Self {
        let mut b = Self::zeros(name, c, c);
        for i in 0..c {
            b.w_xy.data[(i * c + i) * 9 + 4] = T::one();
            b.w_z.data[(i * c + i) * 3 + 1] = T::one();
            b.w_t.data[(i * c + i) * 3 + 1] = T::one();
        }
        b
    }

    /// Weight count excluding biases.
    pub fn weight_count(&self) -> usize {
        self.w_xy.len() + self.w_z.len() + self.w_t.len()
    }

    pub fn params(&self) -> [&Param<T>; 6] {
        [&self.w_xy, &self.b_xy, &self.w_z, &self.b_z, &self.w_t, &self.b_t]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 6] {
        [&mut self.w_xy, &mut self.b_xy, &mut self.w_z, &mut self.b_z, &mut self.w_t, &mut self.b_t]
    }

    /// Forward pass without keeping intermediates.
    pub fn apply(&self, x: &Tensor5D<T>) -> Result<Tensor5D<T>> {
        self.check(x)?;
        let mut h = conv_xy(x, &self.w_xy.data, &self.b_xy.data, self.c_out);
        if !self.skip_z {
            h = conv_axis(&h, &self.w_z.data, &self.b_z.data, self.c_out, Axis::Z);
        }
        Ok(conv_axis(&h, &self.w_t.data, &self.b_t.data, self.c_out, Axis::T))
    }

    fn check(&self, x: &Tensor5D<T>) -> Result<()> {
        if x.dims[0] != self.c_in {
            return domain(format!("block expects {} channels, got {}", self.c_in, x.dims[0]));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor5D<T>) -> Result<(Tensor5D<T>, SepCache<T>)> {
        self.check(x)?;
        let h_xy = conv_xy(x, &self.w_xy.data, &self.b_xy.data, self.c_out);
        let h_z = (!self.skip_z).then(|| conv_axis(&h_xy, &self.w_z.data, &self.b_z.data, self.c_out, Axis::Z));
        let out = conv_axis(h_z.as_ref().unwrap_or(&h_xy), &self.w_t.data, &self.b_t.data, self.c_out, Axis::T);
        Ok((out, SepCache { input: x.clone(), h_xy, h_z }))
    }

    pub fn backward(&mut self, g: &Tensor5D<T>, cache: &SepCache<T>) -> Result<Tensor5D<T>> {
        let pre_t = cache.h_z.as_ref().unwrap_or(&cache.h_xy);
        if g.dims != pre_t.dims {
            return domain(format!("gradient dims {:?} do not match block output {:?}", g.dims, pre_t.dims));
        }
        let mut g = conv_axis_backward(pre_t, g, &self.w_t.data, Axis::T, Some((&mut self.w_t.grad, &mut self.b_t.grad)));
        if cache.h_z.is_some() {
            let grads = (!self.frozen_z).then_some((&mut self.w_z.grad[..], &mut self.b_z.grad[..]));
            g = conv_axis_backward(&cache.h_xy, &g, &self.w_z.data, Axis::Z, grads);
        }
        Ok(conv_xy_backward(&cache.input, &g, &self.w_xy.data, Some((&mut self.w_xy.grad, &mut self.b_xy.grad))))
    }

    pub fn flops(&self, voxels: usize) -> u64 {
        let z = if self.skip_z { 0 } else { self.w_z.len() };
        ((self.w_xy.len() + z + self.w_t.len()) * voxels) as u64
    }
}

/// Full 3x3x3x3 convolution over (t, z, y, x); t circular, the rest zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Iso4DConvBlock<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// (c_out, c_in, kt, kz, ky, kx)
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Iso4DConvBlock<T> {
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        Iso4DConvBlock {
            c_in,
            c_out,
            w: Param::zeros(format!("{name}.w"), &[c_out, c_in, 3, 3, 3, 3]),
            b: Param::zeros(format!("{name}.b"), &[c_out]),
        }
    }

    pub fn init(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(name, c_in, c_out);
        b.w = Param::uniform(format!("{name}.w"), &[c_out, c_in, 3, 3, 3, 3], he_bound(81 * c_in), rng);
        b
    }

    /// The isotropic kernel equal to the composition of a separable block's
    /// three kernels (biases are not carried over).
    pub fn from_separable(s: &SepConv4DBlock<T>) -> Self {
        let (ci_n, co_n) = (s.c_in, s.c_out);
        let mut b = Self::zeros("iso", ci_n, co_n);
        let zt = |co: usize, a: usize, kt: usize| s.w_t.data[(co * co_n + a) * 3 + kt];
        for co in 0..co_n {
            for ci in 0..ci_n {
                for kt in 0..3 {
                    for kz in 0..3 {
                        for k in 0..9 {
                            let mut acc = T::zero();
                            for a in 0..co_n {
                                for c in 0..co_n {
                                    let wz = if s.skip_z {
                                        if a == c && kz == 1 { T::one() } else { T::zero() }
                                    } else {
                                        s.w_z.data[(a * co_n + c) * 3 + kz]
                                    };
                                    acc = acc + zt(co, a, kt) * wz * s.w_xy.data[(c * ci_n + ci) * 9 + k];
                                }
                            }
                            b.w.data[((co * ci_n + ci) * 9 + kt * 3 + kz) * 9 + k] = acc;
                        }
                    }
                }
            }
        }
        b
    }

    pub fn weight_count(&self) -> usize {
        self.w.len()
    }

    pub fn forward(&self, x: &Tensor5D<T>) -> Result<Tensor5D<T>> {
        if x.dims[0] != self.c_in {
            return domain(format!("block expects {} channels, got {}", self.c_in, x.dims[0]));
        }
        let [c_in, nt, nz, ny, nx] = x.dims;
        let plane = ny * nx;
        let vol = x.volume();
        let mut out = Tensor5D::zeros([self.c_out, nt, nz, ny, nx]);
        out.data.par_chunks_mut(vol).enumerate().for_each(|(co, oc)| {
            oc.iter_mut().for_each(|v| *v = self.b.data[co]);
            for ci in 0..c_in {
                let xc = x.channel(ci);
                for kt in 0..3 {
                    for kz in 0..3 {
                        for k in 0..9 {
                            let wv = self.w.data[((co * c_in + ci) * 9 + kt * 3 + kz) * 9 + k];
                            for t in 0..nt {
                                let st = axis_src(t, kt, nt, Axis::T).unwrap();
                                for z in 0..nz {
                                    let Some(sz) = axis_src(z, kz, nz, Axis::Z) else { continue };
                                    let d = (t * nz + z) * plane;
                                    let s = (st * nz + sz) * plane;
                                    plane_tap(wv, &xc[s..s + plane], &mut oc[d..d + plane], ny, nx, k / 3, k % 3);
                                }
                            }
                        }
                    }
                }
            }
        });
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor5D<T>, g: &Tensor5D<T>) -> Result<Tensor5D<T>> {
        let [c_in, nt, nz, ny, nx] = x.dims;
        if g.dims != [self.c_out, nt, nz, ny, nx] {
            return domain(format!("gradient dims {:?} do not match block output", g.dims));
        }
        let plane = ny * nx;
        let vol = x.volume();
        let c_out = self.c_out;
        let w = &self.w.data;
        let mut gi = Tensor5D::zeros(x.dims);
        gi.data.par_chunks_mut(vol).enumerate().for_each(|(ci, gc)| {
            for co in 0..c_out {
                let gco = g.channel(co);
                for kt in 0..3 {
                    for kz in 0..3 {
                        for k in 0..9 {
                            let wv = w[((co * c_in + ci) * 9 + kt * 3 + kz) * 9 + k];
                            for t in 0..nt {
                                let st = axis_src(t, kt, nt, Axis::T).unwrap();
                                for z in 0..nz {
                                    let Some(sz) = axis_src(z, kz, nz, Axis::Z) else { continue };
                                    let d = (t * nz + z) * plane;
                                    let s = (st * nz + sz) * plane;
                                    plane_tap_adj(wv, &gco[d..d + plane], &mut gc[s..s + plane], ny, nx, k / 3, k % 3);
                                }
                            }
                        }
                    }
                }
            }
        });
        self.w.grad.par_chunks_mut(c_in * 81).zip(self.b.grad.par_iter_mut()).enumerate().for_each(|(co, (gwc, gbc))| {
            let gco = g.channel(co);
            *gbc = *gbc + gco.iter().copied().sum::<T>();
            for ci in 0..c_in {
                let xc = x.channel(ci);
                for kt in 0..3 {
                    for kz in 0..3 {
                        for k in 0..9 {
                            let mut acc = T::zero();
                            for t in 0..nt {
                                let st = axis_src(t, kt, nt, Axis::T).unwrap();
                                for z in 0..nz {
                                    let Some(sz) = axis_src(z, kz, nz, Axis::Z) else { continue };
                                    let d = (t * nz + z) * plane;
                                    let s = (st * nz + sz) * plane;
                                    acc = acc + plane_tap_dot(&gco[d..d + plane], &xc[s..s + plane], ny, nx, k / 3, k % 3);
                                }
                            }
                            let i = (ci * 9 + kt * 3 + kz) * 9 + k;
                            gwc[i] = gwc[i] + acc;
                        }
                    }
                }
            }
        });
        Ok(gi)
    }
}

/// Pointwise channel mixing `out[o] = b[o] + sum_i w[o, i] x[i]`.
pub fn conv1x1<T: Real>(x: &Tensor5D<T>, w: &[T], b: &[T], c_out: usize) -> Tensor5D<T> {
    let c_in = x.dims[0];
    let vol = x.volume();
    let mut out = Tensor5D::zeros([c_out, x.dims[1], x.dims[2], x.dims[3], x.dims[4]]);
    out.data.par_chunks_mut(vol).enumerate().for_each(|(o, oc)| {
        oc.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..c_in {
            axpy(w[o * c_in + i], x.channel(i), oc);
        }
    });
    out
}

pub fn conv1x1_backward<T: Real>(x: &Tensor5D<T>, g: &Tensor5D<T>, w: &[T], gw: &mut [T], gb: &mut [T]) -> Tensor5D<T> {
    let c_in = x.dims[0];
    let c_out = g.dims[0];
    let vol = x.volume();
    let mut gi = Tensor5D::zeros(x.dims);
    gi.data.par_chunks_mut(vol).enumerate().for_each(|(i, gc)| {
        for o in 0..c_out {
            axpy(w[o * c_in + i], g.channel(o), gc);
        }
    });
    for o in 0..c_out {
        let go = g.channel(o);
        gb[o] = gb[o] + go.iter().copied().sum::<T>();
        for i in 0..c_in {
            gw[o * c_in + i] = gw[o * c_in + i] + dot(go, x.channel(i));
        }
    }
    gi
}

pub fn relu<T: Real>(x: Tensor5D<T>) -> Tensor5D<T> {
    let mut x = x;
    x.data.par_iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor5D<T>, g: &Tensor5D<T>) -> Tensor5D<T> {
    let data = out.data.par_iter().zip(&g.data).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect();
    Tensor5D { dims: g.dims, data }
}

/// 2x2 average pooling in x-y, and 2 in z when `pool_z`.
pub fn avg_pool<T: Real>(x: &Tensor5D<T>, pool_z: bool) -> Tensor5D<T> {
    let [c, nt, nz, ny, nx] = x.dims;
    let fz = if pool_z { 2 } else { 1 };
    let (oz, oy, ox) = (nz / fz, ny / 2, nx / 2);
    let scale = T::of(1.0 / (4 * fz) as f64);
    let mut out = Tensor5D::zeros([c, nt, oz, oy, ox]);
    out.data.par_chunks_mut(oz * oy * ox).enumerate().for_each(|(ct, oc)| {
        let (ch, t) = (ct / nt, ct % nt);
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut s = T::zero();
                    for dz in 0..fz {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s = s + x.data[x.index(ch, t, z * fz + dz, y * 2 + dy, xx * 2 + dx)];
                            }
                        }
                    }
                    oc[(z * oy + y) * ox + xx] = s * scale;
                }
            }
        }
    });
    out
}

pub fn avg_pool_backward<T: Real>(g: &Tensor5D<T>, in_dims: [usize; 5], pool_z: bool) -> Tensor5D<T> {
    let fz = if pool_z { 2 } else { 1 };
    let scale = T::of(1.0 / (4 * fz) as f64);
    let mut gi = upsample(g, pool_z, in_dims);
    gi.data.iter_mut().for_each(|v| *v = *v * scale);
    gi
}

/// Nearest-neighbour upsampling to `out_dims` (x-y by 2, z by 2 when `up_z`).
pub fn upsample<T: Real>(x: &Tensor5D<T>, up_z: bool, out_dims: [usize; 5]) -> Tensor5D<T> {
    let [_, nt, nz, ny, nx] = out_dims;
    let fz = if up_z { 2 } else { 1 };
    let mut out = Tensor5D::zeros(out_dims);
    out.data.par_chunks_mut(nz * ny * nx).enumerate().for_each(|(ct, oc)| {
        let (ch, t) = (ct / nt, ct % nt);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    oc[(z * ny + y) * nx + xx] = x.data[x.index(ch, t, z / fz, y / 2, xx / 2)];
                }
            }
        }
    });
    out
}

pub fn upsample_backward<T: Real>(g: &Tensor5D<T>, in_dims: [usize; 5], up_z: bool) -> Tensor5D<T> {
    let [_, nt, nz, ny, nx] = g.dims;
    let fz = if up_z { 2 } else { 1 };
    let [_, _, iz, iy, ix] = in_dims;
    let mut gi = Tensor5D::zeros(in_dims);
    gi.data.par_chunks_mut(iz * iy * ix).enumerate().for_each(|(ct, gc)| {
        let (ch, t) = (ct / nt, ct % nt);
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    let d = ((z / fz) * iy + y / 2) * ix + xx / 2;
                    gc[d] = gc[d] + g.data[g.index(ch, t, z, y, xx)];
                }
            }
        }
    });
    gi
}
