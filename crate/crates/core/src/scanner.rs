//! Circular cone-beam scanning with a laterally displaced (half-fan) flat detector.
//!
//! At gantry angle `b` the source sits at `sad * (cos b, sin b, 0)`, the detector
//! center at `-(sdd - sad) * (cos b, sin b, 0)`, the detector u axis points along
//! `(-sin b, cos b, 0)` and v along +z. Channel centers are at
//! `u = offset_u + (iu - (nu - 1) / 2) * du` and `v = (iv - (nv - 1) / 2) * dv`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::phantom::Phantom4D;
use crate::respiration::{phase_amplitudes, phase_sort, BreathingSignal};
use crate::volume::{GridSpec, Volume3D};

pub const RSP_MAGIC: &[u8; 4] = b"RSP1";
/// Linear attenuation of water, mm^-1.
pub const MU_WATER: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    /// Source to isocenter, mm.
    pub sad: f64,
    /// Source to detector, mm.
    pub sdd: f64,
    /// Physical detector extent (u, v), mm.
    pub detector_size: [f64; 2],
    /// Channel counts (u, v).
    pub detector_channels: [usize; 2],
    /// Lateral detector shift for half-fan scanning, mm at the detector.
    pub detector_offset_u: f64,
    pub views_per_turn: usize,
    /// Seconds per 360 degree turn.
    pub rotation_time: f64,
    pub start_angle: f64,
    /// +1 or -1.
    pub direction: i32,
}

impl ScanGeometry {
    /// Desk-scale default: the clinical 1000/1500 mm geometry and 397 x 298 mm
    /// panel with 256 x 192 channels, 240 views per 60 s turn and a quarter-width
    /// half-fan shift.
    pub fn desk() -> Self {
        ScanGeometry {
            sad: 1000.0,
            sdd: 1500.0,
            detector_size: [397.0, 298.0],
            detector_channels: [256, 192],
            detector_offset_u: 0.25 * 397.0,
            views_per_turn: 240,
            rotation_time: 60.0,
            start_angle: 0.0,
            direction: 1,
        }
    }

    /// Full clinical protocol numbers (1024 x 768 channels, 680 views per turn).
    pub fn clinical() -> Self {
        ScanGeometry { detector_channels: [1024, 768], views_per_turn: 680, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sad > 0.0) || !(self.sdd > self.sad) {
            return domain(format!("need 0 < sad < sdd, got sad={} sdd={}", self.sad, self.sdd));
        }
        if self.detector_channels.iter().any(|&c| c < 2) {
            return domain("detector needs at least 2 channels per axis");
        }
        if self.detector_size.iter().any(|&s| !(s > 0.0)) {
            return domain("detector size must be positive");
        }
        if self.views_per_turn < 2 {
            return domain("need at least 2 views per turn");
        }
        if !(self.rotation_time > 0.0) {
            return domain("rotation time must be positive");
        }
        if self.direction != 1 && self.direction != -1 {
            return domain("direction must be +1 or -1");
        }
        Ok(())
    }

    pub fn du(&self) -> f64 {
        self.detector_size[0] / self.detector_channels[0] as f64
    }

    pub fn dv(&self) -> f64 {
        self.detector_size[1] / self.detector_channels[1] as f64
    }

    #[inline]
    pub fn channel_u(&self, iu: usize) -> f64 {
        self.detector_offset_u + (iu as f64 - (self.detector_channels[0] as f64 - 1.0) / 2.0) * self.du()
    }

    #[inline]
    pub fn channel_v(&self, iv: usize) -> f64 {
        (iv as f64 - (self.detector_channels[1] as f64 - 1.0) / 2.0) * self.dv()
    }

    /// Magnification from the isocenter plane to the detector.
    pub fn magnification(&self) -> f64 {
        self.sdd / self.sad
    }

    pub fn view_angle(&self, k: usize) -> f64 {
        self.start_angle + self.direction as f64 * 2.0 * std::f64::consts::PI * k as f64 / self.views_per_turn as f64
    }

    pub fn view_time(&self, k: usize) -> f64 {
        k as f64 * self.rotation_time / self.views_per_turn as f64
    }

    pub fn view_times(&self) -> Vec<f64> {
        (0..self.views_per_turn).map(|k| self.view_time(k)).collect()
    }

    pub fn source(&self, angle: f64) -> [f64; 3] {
        [self.sad * angle.cos(), self.sad * angle.sin(), 0.0]
    }

    pub fn detector_point(&self, angle: f64, u: f64, v: f64) -> [f64; 3] {
        let (s, c) = angle.sin_cos();
        let back = self.sdd - self.sad;
        [-back * c - u * s, -back * s + u * c, v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub angle: f64,
    pub time: f64,
    pub phase: Option<usize>,
    /// Line integrals, (v, u) with u fastest.
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub geometry: ScanGeometry,
    pub views: Vec<View>,
}

impl ProjectionSet {
    pub fn angles(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.angle).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.time).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let n = self.geometry.detector_channels[0] * self.geometry.detector_channels[1];
        if self.views.iter().any(|v| v.data.len() != n) {
            return domain("every view must match the detector dimensions");
        }
        if self.views.windows(2).any(|w| w[1].time < w[0].time) {
            return domain("view times must be non-decreasing");
        }
        Ok(())
    }

    pub fn write_rsp(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_rsp_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_rsp_bytes(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::new();
        out.extend_from_slice(RSP_MAGIC);
        for v in [g.sad, g.sdd, g.detector_size[0], g.detector_size[1]] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in g.detector_channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.extend_from_slice(&g.detector_offset_u.to_le_bytes());
        out.extend_from_slice(&(g.views_per_turn as u32).to_le_bytes());
        for v in [g.rotation_time, g.start_angle, g.direction as f64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.views.len() as u32).to_le_bytes());
        for v in &self.views {
            out.extend_from_slice(&v.angle.to_le_bytes());
            out.extend_from_slice(&v.time.to_le_bytes());
            out.extend_from_slice(&v.phase.map_or(-1, |p| p as i32).to_le_bytes());
        }
        for v in &self.views {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn read_rsp(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_rsp_bytes(&bytes)
    }

    pub fn from_rsp_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != RSP_MAGIC {
            return Err(Error::Integrity("not an RSP1 projection file".into()));
        }
        let sad = r.f64()?;
        let sdd = r.f64()?;
        let detector_size = [r.f64()?, r.f64()?];
        let detector_channels = [r.u32()? as usize, r.u32()? as usize];
        let detector_offset_u = r.f64()?;
        let views_per_turn = r.u32()? as usize;
        let rotation_time = r.f64()?;
        let start_angle = r.f64()?;
        let direction = r.f64()? as i32;
        let geometry = ScanGeometry {
            sad,
            sdd,
            detector_size,
            detector_channels,
            detector_offset_u,
            views_per_turn,
            rotation_time,
            start_angle,
            direction,
        };
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let angle = r.f64()?;
            let time = r.f64()?;
            let phase = r.i32()?;
            headers.push((angle, time, if phase < 0 { None } else { Some(phase as usize) }));
        }
        let n = detector_channels[0] * detector_channels[1];
        let mut views = Vec::with_capacity(count);
        for (angle, time, phase) in headers {
            let raw = r.take(4 * n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            views.push(View { angle, time, phase, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after RSP1 payload".into()));
        }
        let set = ProjectionSet { geometry, views };
        set.validate()?;
        Ok(set)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!("file truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// HU to linear attenuation (mm^-1).
pub fn hu_to_mu(volume: &Volume3D, mu_water: f64) -> Volume3D {
    volume.map(|hu| (mu_water * (1.0 + hu as f64 / 1000.0)) as f32)
}

/// Exact line integral through a voxel grid between two points, walking voxel
/// boundaries in order and summing `intersection length * value`.
pub fn ray_integral(volume: &Volume3D, from: [f64; 3], to: [f64; 3]) -> f64 {
    let g = &volume.grid;
    let [nz, ny, nx] = g.dims;
    let n = [nx, ny, nz];
    let s = [g.spacing[2], g.spacing[1], g.spacing[0]];
    let lo = [g.origin[2] - 0.5 * s[0], g.origin[1] - 0.5 * s[1], g.origin[0] - 0.5 * s[2]];
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let length = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if length == 0.0 {
        return 0.0;
    }

    let (mut a_in, mut a_out) = (0.0f64, 1.0f64);
    for ax in 0..3 {
        let hi = lo[ax] + n[ax] as f64 * s[ax];
        if d[ax].abs() < 1e-300 {
            if from[ax] < lo[ax] || from[ax] > hi {
                return 0.0;
            }
        } else {
            let a0 = (lo[ax] - from[ax]) / d[ax];
            let a1 = (hi - from[ax]) / d[ax];
            a_in = a_in.max(a0.min(a1));
            a_out = a_out.min(a0.max(a1));
        }
    }
    if a_in >= a_out {
        return 0.0;
    }

    let mid = 0.5 * (a_in + a_out);
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    // entry voxel: nudge inside along the ray to avoid landing on a boundary plane
    let a_probe = a_in + 1e-9 * (a_out - a_in).min(1.0).max(mid - a_in).min(1e-3);
    for ax in 0..3 {
        let p = from[ax] + a_probe * d[ax];
        let i = ((p - lo[ax]) / s[ax]).floor() as isize;
        idx[ax] = i.clamp(0, n[ax] as isize - 1);
        if d[ax] > 0.0 {
            step[ax] = 1;
            t_next[ax] = (lo[ax] + (idx[ax] + 1) as f64 * s[ax] - from[ax]) / d[ax];
            t_delta[ax] = s[ax] / d[ax];
        } else if d[ax] < 0.0 {
            step[ax] = -1;
            t_next[ax] = (lo[ax] + idx[ax] as f64 * s[ax] - from[ax]) / d[ax];
            t_delta[ax] = -s[ax] / d[ax];
        }
    }

    let data = &volume.data;
    let mut sum = 0.0;
    let mut a = a_in;
    loop {
        let ax = if t_next[0] <= t_next[1] {
            if t_next[0] <= t_next[2] { 0 } else { 2 }
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let a_exit = t_next[ax].min(a_out);
        let flat = (idx[2] as usize * ny + idx[1] as usize) * nx + idx[0] as usize;
        sum += (a_exit - a) * data[flat] as f64;
        if a_exit >= a_out {
            break;
        }
        a = a_exit;
        idx[ax] += step[ax];
        if idx[ax] < 0 || idx[ax] >= n[ax] as isize {
            break;
        }
        t_next[ax] += t_delta[ax];
    }
    sum * length
}

fn check_source_outside(volume: &Volume3D, source: [f64; 3]) -> Result<()> {
    let g = &volume.grid;
    let inside = (0..3).all(|ax| {
        let (o, sp, n) = (g.origin[2 - ax], g.spacing[2 - ax], g.dims[2 - ax]);
        let lo = o - 0.5 * sp;
        let hi = lo + n as f64 * sp;
        source[ax] >= lo && source[ax] <= hi
    });
    if inside {
        return domain("source lies inside the volume bounding box");
    }
    Ok(())
}

/// Cone-beam projection of an attenuation volume (mm^-1) at one gantry angle.
/// Returns `nv * nu` line integrals, u fastest.
pub fn forward_project(volume: &Volume3D, geometry: &ScanGeometry, angle: f64) -> Result<Vec<f32>> {
    geometry.validate()?;
    volume.grid.validate()?;
    let source = geometry.source(angle);
    check_source_outside(volume, source)?;
    let [nu, nv] = geometry.detector_channels;
    let us: Vec<f64> = (0..nu).map(|iu| geometry.channel_u(iu)).collect();
    let mut out = vec![0f32; nu * nv];
    out.par_chunks_mut(nu).enumerate().for_each(|(iv, row)| {
        let v = geometry.channel_v(iv);
        for (iu, cell) in row.iter_mut().enumerate() {
            let target = geometry.detector_point(angle, us[iu], v);
            *cell = ray_integral(volume, source, target) as f32;
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanOptions {
    pub n_phases: usize,
    /// Project each view's ground-truth phase volume instead of the continuous breathing state.
    pub quantize: bool,
    /// Standard deviation of additive Gaussian noise on the line integrals.
    pub noise_sd: f64,
    pub seed: u64,
    pub mu_water: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { n_phases: 10, quantize: true, noise_sd: 0.0, seed: 0, mu_water: MU_WATER }
    }
}

/// Respiration-gated scan of a dynamic phantom. View `k` is taken at
/// `start + direction * 2 pi k / views_per_turn` and time `k * rotation_time / views_per_turn`.
pub fn simulate_4d_scan(
    phantom: &Phantom4D,
    signal: &BreathingSignal,
    geometry: &ScanGeometry,
    grid: &GridSpec,
    opts: &ScanOptions,
) -> Result<ProjectionSet> {
    geometry.validate()?;
    let times = geometry.view_times();
    let last = *times.last().unwrap();
    if signal.start() > 0.0 || signal.end() < last {
        return domain(format!(
            "breathing signal covers [{}, {}] s but the scan needs [0, {last}] s",
            signal.start(),
            signal.end()
        ));
    }
    let (lo, hi) = signal.amplitudes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi - lo < 1e-12 {
        // no breathing: every view sees the same volume and lands in phase 0
        let mu = hu_to_mu(&phantom.sample_volume(lo.clamp(0.0, 1.0), grid)?, opts.mu_water);
        let mut set = scan_static(&mu, geometry)?;
        set.views.iter_mut().for_each(|v| v.phase = Some(0));
        add_noise(&mut set.views, opts.noise_sd, opts.seed)?;
        return Ok(set);
    }
    let phase_map = phase_sort(signal, &times, opts.n_phases)?;
    let phase_volumes = if opts.quantize {
        let amps = phase_amplitudes(opts.n_phases);
        amps.iter()
            .map(|&a| Ok(hu_to_mu(&phantom.sample_volume(a, grid)?, opts.mu_water)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut views = times
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let angle = geometry.view_angle(k);
            let phase = phase_map.phase_of_view[k];
            let data = if opts.quantize {
                forward_project(&phase_volumes[phase], geometry, angle)?
            } else {
                let amp = signal.amplitude_at(t).clamp(0.0, 1.0);
                forward_project(&hu_to_mu(&phantom.sample_volume(amp, grid)?, opts.mu_water), geometry, angle)?
            };
            Ok(View { angle, time: t, phase: Some(phase), data })
        })
        .collect::<Result<Vec<_>>>()?;
    add_noise(&mut views, opts.noise_sd, opts.seed)?;
    Ok(ProjectionSet { geometry: *geometry, views })
}

/// All views of a single attenuation volume; phases left unset.
pub fn scan_static(volume_mu: &Volume3D, geometry: &ScanGeometry) -> Result<ProjectionSet> {
    geometry.validate()?;
    let views = (0..geometry.views_per_turn)
        .map(|k| {
            let angle = geometry.view_angle(k);
            Ok(View { angle, time: geometry.view_time(k), phase: None, data: forward_project(volume_mu, geometry, angle)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectionSet { geometry: *geometry, views })
}

fn add_noise(views: &mut [View], sd: f64, seed: u64) -> Result<()> {
    if sd < 0.0 || !sd.is_finite() {
        return domain("noise sd must be finite and non-negative");
    }
    if sd == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).unwrap();
    for v in views {
        for x in &mut v.data {
            *x += normal.sample(&mut rng) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::respiration::{synth_breathing, SynthParams};
    use proptest::prelude::*;

    fn tiny_geometry() -> ScanGeometry {
        ScanGeometry {
            detector_channels: [48, 32],
            views_per_turn: 24,
            ..ScanGeometry::desk()
        }
    }

    fn ball(grid: GridSpec, r: f64, mu: f32) -> Volume3D {
        let mut v = Volume3D::zeros(grid);
        let [nz, ny, nx] = grid.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = grid.world(k, j, i);
                    if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= r * r {
                        let idx = v.index(k, j, i);
                        v.data[idx] = mu;
                    }
                }
            }
        }
        v
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let g = GridSpec::centered([8, 16, 16], [10.0; 3]);
        let p = forward_project(&Volume3D::zeros(g), &tiny_geometry(), 0.3).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn axis_aligned_ray_through_a_slab() {
        // 10 voxels of 2 mm with value 0.5 along x: integral 10
        let g = GridSpec::centered([1, 1, 10], [2.0, 2.0, 2.0]);
        let v = Volume3D::filled(g, 0.5);
        let got = ray_integral(&v, [-100.0, 0.0, 0.0], [100.0, 0.0, 0.0]);
        assert!((got - 10.0).abs() < 1e-12, "{got}");
        // diagonal through the 2x2 face of a single voxel column
        let g = GridSpec::centered([1, 2, 2], [1.0, 1.0, 1.0]);
        let v = Volume3D::filled(g, 1.0);
        let got = ray_integral(&v, [-5.0, -5.0, 0.0], [5.0, 5.0, 0.0]);
        assert!((got - 2.0 * 2f64.sqrt()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn source_inside_volume_is_rejected() {
        let g = GridSpec::centered([4, 400, 400], [10.0; 3]);
        assert!(forward_project(&Volume3D::zeros(g), &tiny_geometry(), 0.0).is_err());
    }

    #[test]
    fn symmetric_object_gives_symmetric_projection() {
        let g = GridSpec::centered([16, 32, 32], [5.0; 3]);
        let v = ball(g, 50.0, 0.02);
        let geo = ScanGeometry { detector_offset_u: 0.0, ..tiny_geometry() };
        let p = forward_project(&v, &geo, 0.0).unwrap();
        let [nu, nv] = geo.detector_channels;
        let scale = p.iter().cloned().fold(0.0f32, f32::max);
        for iv in 0..nv {
            for iu in 0..nu {
                let a = p[iv * nu + iu];
                let b = p[iv * nu + nu - 1 - iu];
                assert!((a - b).abs() <= 1e-4 * scale, "({iv},{iu}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn scaling_grid_and_object_scales_integrals() {
        let geo = tiny_geometry();
        let small = ball(GridSpec::centered([16, 24, 24], [4.0; 3]), 30.0, 0.02);
        let big = ball(GridSpec::centered([16, 24, 24], [8.0; 3]), 60.0, 0.02);
        // scale the geometry by the same factor so rays hit corresponding voxels
        let geo2 = ScanGeometry { sad: 2.0 * geo.sad, sdd: 2.0 * geo.sdd, detector_size: [2.0 * geo.detector_size[0], 2.0 * geo.detector_size[1]], detector_offset_u: 2.0 * geo.detector_offset_u, ..geo };
        let a = forward_project(&small, &geo, 0.7).unwrap();
        let b = forward_project(&big, &geo2, 0.7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-4 * y.abs().max(1e-3), "{x} {y}");
        }
    }

    #[test]
    fn rsp_roundtrip_and_truncation() {
        let g = GridSpec::centered([8, 16, 16], [10.0; 3]);
        let geo = tiny_geometry();
        let mut set = scan_static(&ball(g, 40.0, 0.02), &geo).unwrap();
        set.views[3].phase = Some(2);
        let bytes = set.to_rsp_bytes();
        let back = ProjectionSet::from_rsp_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert!(matches!(ProjectionSet::from_rsp_bytes(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
    }

    #[test]
    fn scan_protocol_arithmetic() {
        // 680 views per 60 s turn against a 4 s breathing period
        let geo = ScanGeometry::clinical();
        let views_per_second = geo.views_per_turn as f64 / geo.rotation_time;
        let views_per_cycle = views_per_second * 4.0;
        assert!((views_per_cycle - 45.333).abs() < 1e-3);
        assert!((680.0 / views_per_cycle - 15.0f64).abs() < 1e-9);
    }

    #[test]
    fn short_signal_is_rejected_and_scans_are_deterministic() {
        let phantom = Phantom4D::thorax_v1();
        let grid = GridSpec::centered([8, 16, 16], [20.0; 3]);
        let geo = tiny_geometry();
        let short = synth_breathing(&SynthParams { duration: 30.0, ..Default::default() }).unwrap();
        assert!(simulate_4d_scan(&phantom, &short, &geo, &grid, &ScanOptions::default()).is_err());

        let sig = synth_breathing(&SynthParams::default()).unwrap();
        let opts = ScanOptions { noise_sd: 0.01, seed: 5, ..Default::default() };
        let a = simulate_4d_scan(&phantom, &sig, &geo, &grid, &opts).unwrap();
        let b = simulate_4d_scan(&phantom, &sig, &geo, &grid, &opts).unwrap();
        assert_eq!(a.to_rsp_bytes(), b.to_rsp_bytes());
        assert!(a.views.iter().all(|v| v.phase.is_some()));
    }

    #[test]
    fn constant_signal_projects_one_volume() {
        let phantom = Phantom4D::thorax_v1();
        let grid = GridSpec::centered([8, 16, 16], [20.0; 3]);
        let geo = tiny_geometry();
        let flat = BreathingSignal::new((0..=600).map(|i| i as f64 * 0.1).collect(), vec![0.3; 601], vec![]).unwrap();
        let mu = hu_to_mu(&phantom.sample_volume(0.3, &grid).unwrap(), MU_WATER);
        let plain = scan_static(&mu, &geo).unwrap();
        for quantize in [true, false] {
            let opts = ScanOptions { quantize, ..Default::default() };
            let set = simulate_4d_scan(&phantom, &flat, &geo, &grid, &opts).unwrap();
            for (a, b) in set.views.iter().zip(&plain.views) {
                assert_eq!(a.data, b.data);
                assert_eq!(a.phase, Some(0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn projection_is_linear(seed in 0u64..10_000, a in -3.0f32..3.0, b in -3.0f32..3.0, angle in 0.0f64..6.28) {
            use rand::Rng;
            let g = GridSpec::centered([6, 10, 10], [15.0; 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v1 = Volume3D::from_data(g, (0..g.len()).map(|_| rng.random_range(0.0..0.03f32)).collect()).unwrap();
            let v2 = Volume3D::from_data(g, (0..g.len()).map(|_| rng.random_range(0.0..0.03f32)).collect()).unwrap();
            let combo = Volume3D::from_data(g, v1.data.iter().zip(&v2.data).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let geo = tiny_geometry();
            let p1 = forward_project(&v1, &geo, angle).unwrap();
            let p2 = forward_project(&v2, &geo, angle).unwrap();
            let pc = forward_project(&combo, &geo, angle).unwrap();
            let scale = p1.iter().chain(&p2).map(|x| x.abs()).fold(0.0f32, f32::max) * (a.abs() + b.abs()).max(1.0);
            for i in 0..pc.len() {
                let expect = a * p1[i] + b * p2[i];
                prop_assert!((pc[i] - expect).abs() <= 1e-5 * scale, "{} vs {}", pc[i], expect);
            }
        }
    }
}
