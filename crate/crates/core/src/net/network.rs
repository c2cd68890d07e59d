//! U-Net over (t, z, y, x) built from separable 4D blocks.
//!
//! Each level holds two blocks with a ReLU after each. The encoder average-pools
//! x-y by 2 per level and z by 2 while z is at least 4 and even; t is never pooled.
//! The decoder upsamples (nearest), concatenates the skip (skip first), and runs two
//! more blocks. A 1x1 head maps to one channel, and with `residual` the input
//! channel 0 is added back.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::tensor::{Real, Tensor5D};
use crate::error::{domain, Error, Result};
use crate::volume::{Volume3D, Volume4D};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Feature channels per level, finest first.
    pub channels: Vec<usize>,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { in_channels: 2, channels: vec![16, 32, 64], residual: true }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return domain("network needs at least one level");
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return domain("channel counts must be positive");
        }
        Ok(())
    }

    /// x and y must be divisible by this.
    pub fn xy_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    /// Two blocks per level.
    pub encoder: Vec<[SepConv4DBlock<T>; 2]>,
    /// Levels 0..L-1, finest first.
    pub decoder: Vec<[SepConv4DBlock<T>; 2]>,
    pub head_w: Param<T>,
    pub head_b: Param<T>,
}

struct LevelCache<T> {
    c1: SepCache<T>,
    a1: Tensor5D<T>,
    c2: SepCache<T>,
    a2: Tensor5D<T>,
}

pub struct NetCache<T> {
    enc: Vec<LevelCache<T>>,
    dec: Vec<Option<LevelCache<T>>>,
    pool_z: Vec<bool>,
    /// Input of the upsampling at each decoder level.
    up_in: Vec<[usize; 5]>,
    head_in: Tensor5D<T>,
}

impl<T: Real> Network<T> {
    /// Seeded initialization. The head starts at zero, so a residual network
    /// begins as the identity on its input channel 0.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config.channels;
        let levels = c.len();
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let c_in = if l == 0 { config.in_channels } else { c[l - 1] };
            encoder.push([
                SepConv4DBlock::init(&format!("enc{l}.0"), c_in, c[l], &mut rng),
                SepConv4DBlock::init(&format!("enc{l}.1"), c[l], c[l], &mut rng),
            ]);
        }
        let mut decoder = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels - 1 {
            decoder.push([
                SepConv4DBlock::init(&format!("dec{l}.0"), c[l] + c[l + 1], c[l], &mut rng),
                SepConv4DBlock::init(&format!("dec{l}.1"), c[l], c[l], &mut rng),
            ]);
        }
        let head_w = Param::zeros("head.w", &[1, c[0]]);
        let head_b = Param::zeros("head.b", &[1]);
        Ok(Network { config, encoder, decoder, head_w, head_b })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SepConv4DBlock<T>> {
        self.encoder.iter().chain(&self.decoder).flat_map(|b| b.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut SepConv4DBlock<T>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(|b| b.iter_mut())
    }

    /// All parameters in a fixed order: encoder, decoder, head.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.blocks().flat_map(|b| b.params()).collect();
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let Network { encoder, decoder, head_w, head_b, .. } = self;
        let mut out: Vec<&mut Param<T>> =
            encoder.iter_mut().chain(decoder.iter_mut()).flat_map(|b| b.iter_mut()).flat_map(|b| b.params_mut()).collect();
        out.push(head_w);
        out.push(head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Stage I of Tetris training skips and freezes every z sub-convolution.
    pub fn set_z_frozen(&mut self, frozen: bool) {
        for b in self.blocks_mut() {
            b.skip_z = frozen;
            b.frozen_z = frozen;
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let cp = |p: &Param<T>| Param {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
            grad: vec![U::zero(); p.len()],
        };
        let cb = |b: &SepConv4DBlock<T>| SepConv4DBlock {
            c_in: b.c_in,
            c_out: b.c_out,
            w_xy: cp(&b.w_xy),
            b_xy: cp(&b.b_xy),
            w_z: cp(&b.w_z),
            b_z: cp(&b.b_z),
            w_t: cp(&b.w_t),
            b_t: cp(&b.b_t),
            skip_z: b.skip_z,
            frozen_z: b.frozen_z,
        };
        Network {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(|l| [cb(&l[0]), cb(&l[1])]).collect(),
            decoder: self.decoder.iter().map(|l| [cb(&l[0]), cb(&l[1])]).collect(),
            head_w: cp(&self.head_w),
            head_b: cp(&self.head_b),
        }
    }

    fn check_input(&self, x: &Tensor5D<T>) -> Result<()> {
        if x.dims[0] != self.config.in_channels {
            return domain(format!("network expects {} input channels, got {}", self.config.in_channels, x.dims[0]));
        }
        let m = self.config.xy_multiple();
        if x.dims[3] % m != 0 || x.dims[4] % m != 0 {
            return domain(format!("x and y extents {:?} must be multiples of {m}", &x.dims[3..]));
        }
        Ok(())
    }

    fn head(&self, h: &Tensor5D<T>, x: &Tensor5D<T>) -> Tensor5D<T> {
        let mut out = conv1x1(h, &self.head_w.data, &self.head_b.data, 1);
        if self.config.residual {
            for (o, &i) in out.data.iter_mut().zip(x.channel(0)) {
                *o = *o + i;
            }
        }
        out
    }

    /// Inference pass without caches.
    pub fn forward(&self, x: &Tensor5D<T>) -> Result<Tensor5D<T>> {
        self.check_input(x)?;
        let levels = self.config.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut pool_z = Vec::with_capacity(levels);
        let mut h = x.clone();
        for (l, [b1, b2]) in self.encoder.iter().enumerate() {
            let a2 = relu(b2.apply(&relu(b1.apply(&h)?))?);
            if l + 1 < levels {
                let pz = pools_z(&a2);
                h = avg_pool(&a2, pz);
                pool_z.push(pz);
                skips.push(a2);
            } else {
                h = a2;
            }
        }
        for l in (0..levels - 1).rev() {
            let skip = &skips[l];
            let up = upsample(&h, pool_z[l], [self.config.channels[l + 1], skip.dims[1], skip.dims[2], skip.dims[3], skip.dims[4]]);
            let cat = Tensor5D::concat(skip, &up)?;
            let [b1, b2] = &self.decoder[l];
            h = relu(b2.apply(&relu(b1.apply(&cat)?))?);
        }
        Ok(self.head(&h, x))
    }

    /// Training pass keeping what `backward` needs.
    pub fn forward_cached(&self, x: &Tensor5D<T>) -> Result<(Tensor5D<T>, NetCache<T>)> {
        self.check_input(x)?;
        let levels = self.config.levels();
        let mut enc = Vec::with_capacity(levels);
        let mut pool_z = Vec::with_capacity(levels);
        let mut h = x.clone();
        for (l, [b1, b2]) in self.encoder.iter().enumerate() {
            let (o1, c1) = b1.forward(&h)?;
            let a1 = relu(o1);
            let (o2, c2) = b2.forward(&a1)?;
            let a2 = relu(o2);
            if l + 1 < levels {
                let pz = pools_z(&a2);
                h = avg_pool(&a2, pz);
                pool_z.push(pz);
            } else {
                h = a2.clone();
            }
            enc.push(LevelCache { c1, a1, c2, a2 });
        }
        let mut dec: Vec<Option<LevelCache<T>>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        let mut up_in = vec![[0; 5]; levels.saturating_sub(1)];
        for l in (0..levels - 1).rev() {
            let skip = &enc[l].a2;
            up_in[l] = h.dims;
            let up = upsample(&h, pool_z[l], [self.config.channels[l + 1], skip.dims[1], skip.dims[2], skip.dims[3], skip.dims[4]]);
            let cat = Tensor5D::concat(skip, &up)?;
            let [b1, b2] = &self.decoder[l];
            let (o1, c1) = b1.forward(&cat)?;
            let a1 = relu(o1);
            let (o2, c2) = b2.forward(&a1)?;
            let a2 = relu(o2);
            h = a2.clone();
            dec[l] = Some(LevelCache { c1, a1, c2, a2 });
        }
        let out = self.head(&h, x);
        Ok((out, NetCache { enc, dec, pool_z, up_in, head_in: h }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, g_out: &Tensor5D<T>, cache: &NetCache<T>) -> Result<Tensor5D<T>> {
        if g_out.dims[0] != 1 || g_out.dims[1..] != cache.head_in.dims[1..] {
            return domain(format!("output gradient dims {:?} do not match the forward pass", g_out.dims));
        }
        let levels = self.config.levels();
        let c0 = self.config.channels[0];
        let mut g = conv1x1_backward(&cache.head_in, g_out, &self.head_w.data, &mut self.head_w.grad, &mut self.head_b.grad);
        debug_assert_eq!(g.dims[0], c0);
        let mut skip_grads: Vec<Option<Tensor5D<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let dc = cache.dec[l].as_ref().ok_or_else(|| Error::Domain("incomplete cache".into()))?;
            let [b1, b2] = &mut self.decoder[l];
            g = relu_backward(&dc.a2, &g);
            g = b2.backward(&g, &dc.c2)?;
            g = relu_backward(&dc.a1, &g);
            g = b1.backward(&g, &dc.c1)?;
            let (gs, gu) = g.split(self.config.channels[l]);
            skip_grads[l] = Some(gs);
            g = upsample_backward(&gu, cache.up_in[l], cache.pool_z[l]);
        }
        for l in (0..levels).rev() {
            let ec = &cache.enc[l];
            if l + 1 < levels {
                let mut gp = avg_pool_backward(&g, ec.a2.dims, cache.pool_z[l]);
                if let Some(gs) = &skip_grads[l] {
                    for (a, &b) in gp.data.iter_mut().zip(&gs.data) {
                        *a = *a + b;
                    }
                }
                g = gp;
            }
            let [b1, b2] = &mut self.encoder[l];
            g = relu_backward(&ec.a2, &g);
            g = b2.backward(&g, &ec.c2)?;
            g = relu_backward(&ec.a1, &g);
            g = b1.backward(&g, &ec.c1)?;
        }
        if self.config.residual {
            let v = g.volume();
            for (a, &b) in g.data[..v].iter_mut().zip(&g_out.data) {
                *a = *a + b;
            }
        }
        Ok(g)
    }

    /// Upper bound on the receptive-field half-width along z, in input slices,
    /// assuming z is pooled at every level.
    pub fn z_reach(&self) -> usize {
        let levels = self.config.levels();
        let enc: usize = (0..levels).map(|l| 2 << l).sum();
        let dec: usize = (0..levels - 1).map(|l| 2 << l).sum();
        let pool: usize = (1..levels).map(|l| 1 << l).sum();
        enc + dec + pool
    }

    /// Whole-input inference, or z-tiles of `chunk` slices whose outer `overlap`
    /// slices are discarded. z, chunk and overlap must be multiples of
    /// `2^(levels-1)`, and `chunk >= 2^levels`, so tiles pool exactly like the whole volume.
    pub fn forward_tiled(&self, x: &Tensor5D<T>, chunk: usize, overlap: usize) -> Result<Tensor5D<T>> {
        let nz = x.dims[2];
        if chunk >= nz {
            return self.forward(x);
        }
        let m = self.config.xy_multiple();
        if nz % m != 0 || chunk % m != 0 || overlap % m != 0 || chunk < 2 * m || chunk <= 2 * overlap {
            return domain(format!("tile chunk {chunk} / overlap {overlap} incompatible with {} levels", self.config.levels()));
        }
        let core = chunk - 2 * overlap;
        let [_, nt, _, ny, nx] = x.dims;
        let mut out = Tensor5D::zeros([1, nt, nz, ny, nx]);
        let mut start = 0;
        while start < nz {
            let end = (start + core).min(nz);
            let lo = start.saturating_sub(overlap).min(nz - chunk);
            let tile = self.forward(&x.crop([lo, 0, 0], [chunk, ny, nx])?)?;
            for t in 0..nt {
                for z in start..end {
                    let s = tile.index(0, t, z - lo, 0, 0);
                    let d = out.index(0, t, z, 0, 0);
                    out.data[d..d + ny * nx].copy_from_slice(&tile.data[s..s + ny * nx]);
                }
            }
            start = end;
        }
        Ok(out)
    }
}

fn pools_z<T: Real>(a: &Tensor5D<T>) -> bool {
    a.dims[2] >= 4 && a.dims[2] % 2 == 0
}

/// Parameter count and multiply-adds per axial slice for an input of
/// (t, z, y, x) extents.
pub fn count_params_flops<T: Real>(net: &Network<T>, dims: [usize; 4]) -> Result<(usize, u64)> {
    let [nt, mut nz, mut ny, mut nx] = dims;
    let m = net.config.xy_multiple();
    if dims.contains(&0) || ny % m != 0 || nx % m != 0 {
        return domain(format!("extents {dims:?} incompatible with the network"));
    }
    let z0 = nz;
    let levels = net.config.levels();
    let mut flops = 0u64;
    let mut voxels = Vec::with_capacity(levels);
    for l in 0..levels {
        let v = nt * nz * ny * nx;
        voxels.push(v);
        flops += net.encoder[l].iter().map(|b| b.flops(v)).sum::<u64>();
        if l + 1 < levels {
            if nz >= 4 && nz % 2 == 0 {
                nz /= 2;
            }
            ny /= 2;
            nx /= 2;
        }
    }
    for l in 0..levels - 1 {
        flops += net.decoder[l].iter().map(|b| b.flops(voxels[l])).sum::<u64>();
    }
    flops += (net.head_w.len() * voxels[0]) as u64;
    Ok((net.param_count(), flops / z0 as u64))
}

pub const HU_OFFSET: f32 = 1000.0;
pub const HU_SCALE: f32 = 1500.0;

/// Fixed intensity map onto [0, 1].
pub fn normalize_hu(hu: f32) -> f32 {
    ((hu + HU_OFFSET) / HU_SCALE).clamp(0.0, 1.0)
}

/// Two-channel network input: the phase images and the average broadcast along t.
pub fn network_input(degraded: &Volume4D, average: &Volume3D) -> Result<Tensor5D<f32>> {
    let grid = degraded.grid();
    if average.dims() != grid.dims {
        return domain(format!("average dims {:?} differ from the 4D image {:?}", average.dims(), grid.dims));
    }
    let nt = degraded.n_phases();
    let [nz, ny, nx] = grid.dims;
    let mut data = Vec::with_capacity(2 * nt * grid.len());
    for p in &degraded.phases {
        data.extend(p.data.iter().map(|&v| normalize_hu(v)));
    }
    for _ in 0..nt {
        data.extend(average.data.iter().map(|&v| normalize_hu(v)));
    }
    Tensor5D::new([2, nt, nz, ny, nx], data)
}

/// Training target matching `network_input`: with a residual network the
/// prediction is `x0 + head`, and the head should learn `(target - input) / scale`
/// in HU, so the target is built around the clamped input.
pub fn network_target(degraded: &Volume4D, truth: &Volume4D, residual: bool) -> Result<Tensor5D<f32>> {
    let grid = degraded.grid();
    if truth.grid().dims != grid.dims || truth.n_phases() != degraded.n_phases() {
        return domain("ground truth and degraded 4D images differ in shape");
    }
    let [nz, ny, nx] = grid.dims;
    let mut data = Vec::with_capacity(degraded.n_phases() * grid.len());
    for (d, t) in degraded.phases.iter().zip(&truth.phases) {
        data.extend(d.data.iter().zip(&t.data).map(|(&d, &t)| {
            if residual {
                normalize_hu(d) + (t - d) / HU_SCALE
            } else {
                (t + HU_OFFSET) / HU_SCALE
            }
        }));
    }
    Tensor5D::new([1, degraded.n_phases(), nz, ny, nx], data)
}

/// Back to HU. The residual branch adds the head output to the unclamped input
/// so intensities outside the normalization window survive.
pub fn output_to_hu(out: &Tensor5D<f32>, input: &Tensor5D<f32>, degraded: &Volume4D, residual: bool) -> Result<Volume4D> {
    let grid = degraded.grid();
    let v = grid.len();
    let x0 = input.channel(0);
    let phases = degraded
        .phases
        .iter()
        .enumerate()
        .map(|(t, d)| {
            let r = t * v..(t + 1) * v;
            let data = if residual {
                d.data.iter().zip(&out.data[r.clone()]).zip(&x0[r]).map(|((&hu, &o), &i)| hu + HU_SCALE * (o - i)).collect()
            } else {
                out.data[r].iter().map(|&o| o * HU_SCALE - HU_OFFSET).collect()
            };
            Volume3D::from_data(grid, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Volume4D::new(phases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    pub chunk: usize,
    pub overlap: usize,
}

/// Recover a 4D image from its gated reconstruction and the average image.
pub fn forward_full(net: &Network<f32>, degraded: &Volume4D, average: &Volume3D, tile: Option<TileSpec>) -> Result<Volume4D> {
    let x = network_input(degraded, average)?;
    let out = match tile {
        Some(t) => net.forward_tiled(&x, t.chunk, t.overlap)?,
        None => net.forward(&x)?,
    };
    output_to_hu(&out, &x, degraded, net.config.residual)
}
