//! Dense 5D tensors indexed (channel, t, z, y, x), x fastest.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{domain, Result};

/// Scalar types the network runs in: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5D<T> {
    /// (c, t, z, y, x)
    pub dims: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Real> Tensor5D<T> {
    pub fn zeros(dims: [usize; 5]) -> Self {
        Tensor5D { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn new(dims: [usize; 5], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return domain(format!("tensor dims must be >= 1, got {dims:?}"));
        }
        if data.len() != dims.iter().product::<usize>() {
            return domain(format!("tensor data length {} does not match dims {dims:?}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return domain("tensor contains non-finite values");
        }
        Ok(Tensor5D { dims, data })
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    /// Voxels per channel.
    pub fn volume(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, nt, nz, ny, nx] = self.dims;
        debug_assert!(t < nt);
        (((c * nt + t) * nz + z) * ny + y) * nx + x
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.volume();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn cast<U: Real>(&self) -> Tensor5D<U> {
        Tensor5D { dims: self.dims, data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect() }
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        if a.dims[1..] != b.dims[1..] {
            return domain(format!("cannot concatenate {:?} and {:?}", a.dims, b.dims));
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Tensor5D { dims: [a.dims[0] + b.dims[0], a.dims[1], a.dims[2], a.dims[3], a.dims[4]], data })
    }

    /// Split channels at `c`.
    pub fn split(&self, c: usize) -> (Self, Self) {
        let v = self.volume();
        let [n, t, z, y, x] = self.dims;
        (
            Tensor5D { dims: [c, t, z, y, x], data: self.data[..c * v].to_vec() },
            Tensor5D { dims: [n - c, t, z, y, x], data: self.data[c * v..].to_vec() },
        )
    }

    /// Cyclic shift by `k` frames along t: output frame `(i + k) mod T` is input frame `i`.
    pub fn roll_t(&self, k: usize) -> Self {
        let [c, nt, ..] = self.dims;
        let frame = self.dims[2..].iter().product::<usize>();
        let mut out = Self::zeros(self.dims);
        for ch in 0..c {
            for t in 0..nt {
                let src = (ch * nt + t) * frame;
                let dst = (ch * nt + (t + k) % nt) * frame;
                out.data[dst..dst + frame].copy_from_slice(&self.data[src..src + frame]);
            }
        }
        out
    }

    /// Sub-block starting at (z, y, x) with the given extents, all channels and frames.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let [c, nt, nz, ny, nx] = self.dims;
        if (0..3).any(|a| size[a] == 0 || start[a] + size[a] > [nz, ny, nx][a]) {
            return domain(format!("crop {start:?}+{size:?} outside {:?}", &self.dims[2..]));
        }
        let mut out = Self::zeros([c, nt, size[0], size[1], size[2]]);
        let mut o = 0;
        for ch in 0..c {
            for t in 0..nt {
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        let s = self.index(ch, t, start[0] + z, start[1] + y, start[2]);
                        out.data[o..o + size[2]].copy_from_slice(&self.data[s..s + size[2]]);
                        o += size[2];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (*a - *b).abs().to_f64().unwrap()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_and_crop() {
        let t = Tensor5D::new([1, 3, 2, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let r = t.roll_t(1);
        assert_eq!(r.data[8], 0.0);
        assert_eq!(r.roll_t(2), t);
        let c = t.crop([1, 0, 1], [1, 2, 1]).unwrap();
        assert_eq!(c.data, vec![5.0, 7.0, 13.0, 15.0, 21.0, 23.0]);
        assert!(t.crop([1, 0, 0], [2, 1, 1]).is_err());
        assert!(Tensor5D::new([1, 1, 1, 1, 1], vec![f64::NAN]).is_err());
    }
}
