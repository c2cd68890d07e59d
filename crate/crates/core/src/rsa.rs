//! Rotational streak analysis: per-phase angular coverage, Fourier-domain streak
//! orientation, and Lucas-Kanade trajectory statistics.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::{body_mask, csv_err};
use crate::respiration::PhaseMap;
use crate::volume::{Volume3D, Volume4D};

pub const WEDGES: usize = 36;
const TAU: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub start: f64,
    pub extent: f64,
}

impl Gap {
    pub fn center(&self) -> f64 {
        (self.start + 0.5 * self.extent).rem_euclid(TAU)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngularCoverage {
    pub phase: usize,
    /// Sorted view angles in `[0, 2 pi)`.
    pub angles: Vec<f64>,
    /// Runs of views no further apart than the gap threshold, as (first, last) angles.
    pub clusters: Vec<(f64, f64)>,
    pub gaps: Vec<Gap>,
    /// Extent-weighted axial mean of the gap centers in `[0, pi)`; `None` without gaps.
    pub dominant_gap: Option<f64>,
    /// Angular harmonic of the cluster pattern: the typical number of clusters per phase.
    pub harmonic: usize,
    /// Rotation phase of the gap pattern at `harmonic` (doubled angles), in `[0, 2 pi)`.
    /// Advances steadily with phase even when the gaps tile the circle evenly and
    /// `dominant_gap` is ill-defined.
    pub gap_phase: Option<f64>,
}

/// Axial (mod pi) weighted mean direction.
pub fn axial_mean(angles: &[f64], weights: &[f64]) -> Option<f64> {
    let (s, c) = angles
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(s, c), (a, w)| (s + w * (2.0 * a).sin(), c + w * (2.0 * a).cos()));
    if s.hypot(c) < 1e-12 {
        return None;
    }
    Some((0.5 * s.atan2(c)).rem_euclid(PI))
}

/// Phase angle of harmonic `m` of axial data, `arg sum w e^(2 i m a)`, in `[0, 2 pi)`.
pub fn harmonic_phase(angles: &[f64], weights: &[f64], m: usize) -> Option<f64> {
    let k = 2.0 * m as f64;
    let (s, c) = angles
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(s, c), (a, w)| (s + w * (k * a).sin(), c + w * (k * a).cos()));
    if s.hypot(c) < 1e-12 {
        return None;
    }
    Some(s.atan2(c).rem_euclid(TAU))
}

/// Clusters and gaps of each phase's views on the circle. A gap is any spacing
/// wider than 1.5 nominal view steps (`2 pi / total views`).
pub fn sampling_pattern(phase_map: &PhaseMap, angles: &[f64]) -> Result<Vec<AngularCoverage>> {
    let mut cov = sampling_pattern_raw(phase_map, angles)?;
    let mut counts: Vec<usize> = cov.iter().map(|c| c.clusters.len()).collect();
    counts.sort_unstable();
    let m = counts[counts.len() / 2];
    for c in &mut cov {
        c.harmonic = m;
        let centers: Vec<f64> = c.gaps.iter().map(Gap::center).collect();
        let weights: Vec<f64> = c.gaps.iter().map(|g| g.extent).collect();
        c.gap_phase = if c.gaps.is_empty() { None } else { harmonic_phase(&centers, &weights, m) };
    }
    Ok(cov)
}

fn sampling_pattern_raw(phase_map: &PhaseMap, angles: &[f64]) -> Result<Vec<AngularCoverage>> {
    if phase_map.phase_of_view.len() != angles.len() {
        return domain("phase map and angle list differ in length");
    }
    if angles.is_empty() {
        return domain("no views");
    }
    let threshold = 1.5 * TAU / angles.len() as f64;
    (0..phase_map.n_phases)
        .map(|p| {
            let mut a: Vec<f64> = phase_map.views_of(p).iter().map(|&k| angles[k].rem_euclid(TAU)).collect();
            if a.is_empty() {
                return domain(format!("phase {p} has no views"));
            }
            a.sort_by(|x, y| x.total_cmp(y));
            let n = a.len();
            let mut gaps = Vec::new();
            for i in 0..n {
                let next = if i + 1 < n { a[i + 1] } else { a[0] + TAU };
                let d = next - a[i];
                if d > threshold {
                    gaps.push(Gap { start: a[i], extent: d });
                }
            }
            let clusters = if gaps.is_empty() {
                vec![(a[0], a[n - 1])]
            } else {
                (0..gaps.len())
                    .map(|g| {
                        let first = (gaps[g].start + gaps[g].extent).rem_euclid(TAU);
                        let last = gaps[(g + 1) % gaps.len()].start;
                        (first, last)
                    })
                    .collect()
            };
            let centers: Vec<f64> = gaps.iter().map(Gap::center).collect();
            let weights: Vec<f64> = gaps.iter().map(|g| g.extent).collect();
            Ok(AngularCoverage {
                phase: p,
                angles: a,
                clusters,
                dominant_gap: axial_mean(&centers, &weights),
                gaps,
                harmonic: 1,
                gap_phase: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationProfile {
    /// Energy per 5 degree wedge over `[0, pi)`, summing to 1.
    pub energy: Vec<f64>,
    /// Peak orientation (rad) with parabolic sub-wedge refinement.
    pub argmax: f64,
    pub degenerate: bool,
}

impl OrientationProfile {
    /// Wedge center orientations in `[0, pi)`.
    pub fn orientations() -> Vec<f64> {
        (0..WEDGES).map(|b| (b as f64 + 0.5) * PI / WEDGES as f64).collect()
    }

    /// Rotation phase of the profile at harmonic `m`, comparable to [`AngularCoverage::gap_phase`].
    pub fn harmonic_phase(&self, m: usize) -> Option<f64> {
        if self.degenerate {
            return None;
        }
        harmonic_phase(&Self::orientations(), &self.energy, m)
    }
}

/// Spectral energy of one slice per orientation wedge, after an isotropic Hann taper.
/// Frequencies below 5% of Nyquist are skipped.
fn wedge_energy(diff: &[f64], ny: usize, nx: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let row = planner.plan_fft_forward(nx);
    let col = planner.plan_fft_forward(ny);
    let (cy, cx) = ((ny as f64 - 1.0) / 2.0, (nx as f64 - 1.0) / 2.0);
    let radius = 0.5 * ny.min(nx) as f64;
    let mut buf: Vec<Complex<f64>> = diff
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let (j, i) = ((idx / nx) as f64, (idx % nx) as f64);
            let r = ((j - cy).powi(2) + (i - cx).powi(2)).sqrt() / radius;
            let w = if r < 1.0 { 0.5 + 0.5 * (PI * r).cos() } else { 0.0 };
            Complex::new(v * w, 0.0)
        })
        .collect();
    for r in buf.chunks_mut(nx) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            column[j] = buf[j * nx + i];
        }
        col.process(&mut column);
        for j in 0..ny {
            buf[j * nx + i] = column[j];
        }
    }
    let mut e = vec![0.0; WEDGES];
    for j in 0..ny {
        let ky = if j <= ny / 2 { j as f64 } else { j as f64 - ny as f64 } / ny as f64;
        for i in 0..nx {
            let kx = if i <= nx / 2 { i as f64 } else { i as f64 - nx as f64 } / nx as f64;
            let rho = (kx * kx + ky * ky).sqrt();
            if rho < 0.025 {
                continue;
            }
            let phi = ky.atan2(kx).rem_euclid(PI);
            let b = ((phi / PI * WEDGES as f64) as usize).min(WEDGES - 1);
            e[b] += buf[j * nx + i].norm_sqr();
        }
    }
    e
}

fn finish_profile(e: Vec<f64>) -> OrientationProfile {
    let total: f64 = e.iter().sum();
    if !(total > 0.0) {
        return OrientationProfile { energy: vec![1.0 / WEDGES as f64; WEDGES], argmax: 0.0, degenerate: true };
    }
    let energy: Vec<f64> = e.iter().map(|x| x / total).collect();
    let (b, _) = energy.iter().enumerate().fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let l = energy[(b + WEDGES - 1) % WEDGES];
    let r = energy[(b + 1) % WEDGES];
    let c = energy[b];
    let den = l - 2.0 * c + r;
    let delta = if den < 0.0 { (0.5 * (l - r) / den).clamp(-0.5, 0.5) } else { 0.0 };
    let width = PI / WEDGES as f64;
    let argmax = ((b as f64 + 0.5 + delta) * width).rem_euclid(PI);
    OrientationProfile { energy, argmax, degenerate: false }
}

/// Orientation profile of `image - reference` for one `ny x nx` slice.
pub fn streak_orientation(image: &[f32], reference: &[f32], ny: usize, nx: usize) -> Result<OrientationProfile> {
    if image.len() != ny * nx || reference.len() != ny * nx {
        return domain("slice sizes do not match");
    }
    let diff: Vec<f64> = image.iter().zip(reference).map(|(a, b)| *a as f64 - *b as f64).collect();
    if diff.iter().all(|&d| d == 0.0) {
        return Ok(finish_profile(vec![0.0; WEDGES]));
    }
    Ok(finish_profile(wedge_energy(&diff, ny, nx, &mut FftPlanner::new())))
}

/// Orientation profile with wedge energies pooled over axial slices `z_range`.
pub fn streak_orientation_volume(
    image: &Volume3D,
    reference: &Volume3D,
    z_range: std::ops::Range<usize>,
) -> Result<OrientationProfile> {
    if !image.same_shape(reference) {
        return domain("volumes differ in shape");
    }
    let [nz, ny, nx] = image.dims();
    if z_range.is_empty() || z_range.end > nz {
        return domain(format!("slice range {z_range:?} invalid for {nz} slices"));
    }
    let per_slice: Vec<Vec<f64>> = z_range
        .into_par_iter()
        .map(|k| {
            let diff: Vec<f64> =
                image.slice_z(k).iter().zip(reference.slice_z(k)).map(|(a, b)| *a as f64 - *b as f64).collect();
            if diff.iter().all(|&d| d == 0.0) {
                vec![0.0; WEDGES]
            } else {
                wedge_energy(&diff, ny, nx, &mut FftPlanner::new())
            }
        })
        .collect();
    let mut e = vec![0.0; WEDGES];
    for s in per_slice {
        for (a, b) in e.iter_mut().zip(s) {
            *a += b;
        }
    }
    Ok(finish_profile(e))
}

/// Circular correlation coefficient (Jammalamadaka and SenGupta).
pub fn circular_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return domain("need two equally long angle lists of length >= 2");
    }
    let mean = |x: &[f64]| {
        let (s, c) = x.iter().fold((0.0, 0.0), |(s, c), v| (s + v.sin(), c + v.cos()));
        s.atan2(c)
    };
    let (ma, mb) = (mean(a), mean(b));
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (sa, sb) = ((x - ma).sin(), (y - mb).sin());
        num += sa * sb;
        da += sa * sa;
        db += sb * sb;
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::Degenerate("circular correlation of a constant angle list".into()));
    }
    Ok(num / (da * db).sqrt())
}

/// Fisher-Lee circular correlation; depends only on pairwise angle differences,
/// so it stays defined when either sample has no mean direction.
pub fn fisher_lee_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return domain("need two equally long angle lists of length >= 2");
    }
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (sa, sb) = ((a[i] - a[j]).sin(), (b[i] - b[j]).sin());
            num += sa * sb;
            da += sa * sa;
            db += sb * sb;
        }
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::Degenerate("circular correlation of a constant angle list".into()));
    }
    Ok(num / (da * db).sqrt())
}

/// Circular correlation of orientations defined modulo pi.
pub fn axial_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = |x: &[f64]| x.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
    circular_correlation(&d(a), &d(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Independent flow per axial slice, z component zero.
    Axial,
    Volumetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub levels: usize,
    /// Odd box window edge.
    pub window: usize,
    pub iterations: usize,
    pub mode: FlowMode,
    /// Smallest structure-tensor eigenvalue per window voxel (standardized
    /// frames) for a step to be taken.
    pub min_eigen: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { levels: 3, window: 15, iterations: 1, mode: FlowMode::Volumetric, min_eigen: 0.01 }
    }
}

/// Displacement per voxel in voxels per frame, components (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub dims: [usize; 3],
    pub flow: Vec<[f32; 3]>,
}

impl FlowField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        FlowField { dims, flow: vec![[0.0; 3]; dims.iter().product()] }
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.flow.len() as f64;
        let mut m = [0.0; 3];
        for f in &self.flow {
            for a in 0..3 {
                m[a] += f[a] as f64 / n;
            }
        }
        m
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.flow.iter().map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt()).collect()
    }

    /// Trilinear sample at voxel coordinates (x, y, z), clamped to the grid.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = trilinear(self.dims, p, |idx| self.flow[idx][c] as f64);
        }
        out
    }
}

fn trilinear(dims: [usize; 3], p: [f64; 3], f: impl Fn(usize) -> f64) -> f64 {
    let [nz, ny, nx] = dims;
    let cl = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let (x, y, z) = (cl(p[0], nx), cl(p[1], ny), cl(p[2], nz));
    let (i0, j0, k0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
    let (i1, j1, k1) = ((i0 + 1).min(nx - 1), (j0 + 1).min(ny - 1), (k0 + 1).min(nz - 1));
    let (fx, fy, fz) = (x - i0 as f64, y - j0 as f64, z - k0 as f64);
    let at = |k: usize, j: usize, i: usize| f((k * ny + j) * nx + i);
    let c00 = at(k0, j0, i0) * (1.0 - fx) + at(k0, j0, i1) * fx;
    let c01 = at(k0, j1, i0) * (1.0 - fx) + at(k0, j1, i1) * fx;
    let c10 = at(k1, j0, i0) * (1.0 - fx) + at(k1, j0, i1) * fx;
    let c11 = at(k1, j1, i0) * (1.0 - fx) + at(k1, j1, i1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// One pyramid level down: [1 2 1] smoothing then decimation by 2 on each reduced axis.
fn reduce(data: &[f64], dims: [usize; 3], axes: [bool; 3]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut d = dims;
    for ax in 0..3 {
        if !axes[ax] {
            continue;
        }
        let n = d[ax];
        let m = n.div_ceil(2);
        let stride: usize = d[ax + 1..].iter().product();
        let outer: usize = d[..ax].iter().product();
        let mut nd = d;
        nd[ax] = m;
        let mut out = vec![0.0; outer * m * stride];
        for o in 0..outer {
            for q in 0..m {
                for s in 0..stride {
                    let at = |i: isize| cur[(o * n + i.clamp(0, n as isize - 1) as usize) * stride + s];
                    let c = 2 * q as isize;
                    // average of the pair, each pair member smoothed with [1 2 1] / 4
                    let v = 0.125 * (at(c - 1) + 3.0 * at(c) + 3.0 * at(c + 1) + at(c + 2));
                    out[(o * m + q) * stride + s] = v;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

fn box_sum(data: &mut [f64], dims: [usize; 3], window: usize, axes: [bool; 3]) {
    let h = (window / 2) as isize;
    for ax in 0..3 {
        if !axes[ax] {
            continue;
        }
        let n = dims[ax];
        let stride: usize = dims[ax + 1..].iter().product();
        let outer: usize = dims[..ax].iter().product();
        let mut line = vec![0.0; n];
        for o in 0..outer {
            for s in 0..stride {
                for (i, l) in line.iter_mut().enumerate() {
                    *l = data[(o * n + i) * stride + s];
                }
                for i in 0..n as isize {
                    let mut acc = 0.0;
                    for t in (i - h).max(0)..=(i + h).min(n as isize - 1) {
                        acc += line[t as usize];
                    }
                    data[(o * n + i as usize) * stride + s] = acc;
                }
            }
        }
    }
}

fn gradient(data: &[f64], dims: [usize; 3], ax: usize) -> Vec<f64> {
    let n = dims[ax];
    let stride: usize = dims[ax + 1..].iter().product();
    let outer: usize = dims[..ax].iter().product();
    let mut g = vec![0.0; data.len()];
    if n < 2 {
        return g;
    }
    for o in 0..outer {
        for i in 0..n {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            for s in 0..stride {
                g[(o * n + i) * stride + s] =
                    (data[(o * n + hi) * stride + s] - data[(o * n + lo) * stride + s]) / (hi - lo) as f64;
            }
        }
    }
    g
}

fn sym_eigen2(a: f64, b: f64, d: f64) -> (f64, f64) {
    let tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d).powi(2) + b * b).sqrt();
    (tr + disc, tr - disc)
}

/// Eigenvalues of a symmetric 3x3 matrix (largest, smallest).
fn sym_eigen3(m: [[f64; 3]; 3]) -> (f64, f64) {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        let d = [m[0][0], m[1][1], m[2][2]];
        return (d.iter().cloned().fold(f64::MIN, f64::max), d.iter().cloned().fold(f64::MAX, f64::min));
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut bm = m;
    for (i, row) in bm.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = bm[0][0] * (bm[1][1] * bm[2][2] - bm[1][2] * bm[2][1]) - bm[0][1] * (bm[1][0] * bm[2][2] - bm[1][2] * bm[2][0])
        + bm[0][2] * (bm[1][0] * bm[2][1] - bm[1][1] * bm[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    (e1, e3)
}

const MAX_CONDITION: f64 = 1e6;
/// Below this largest eigenvalue the tensor is roundoff, not image structure.
const MIN_STRUCTURE: f64 = 1e-9;

fn solve2(a: f64, b: f64, d: f64, r0: f64, r1: f64, floor: f64) -> Option<[f64; 2]> {
    let (l1, l2) = sym_eigen2(a, b, d);
    if !(l2 > floor) || l1 < MIN_STRUCTURE || l1 / l2 > MAX_CONDITION {
        return None;
    }
    let det = a * d - b * b;
    Some([(d * r0 - b * r1) / det, (a * r1 - b * r0) / det])
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3], floor: f64) -> Option<[f64; 3]> {
    let (l1, l3) = sym_eigen3(m);
    if !(l3 > floor) || l1 < MIN_STRUCTURE || l1 / l3 > MAX_CONDITION {
        return None;
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][c] = r[row];
        }
        *o = (mc[0][0] * (mc[1][1] * mc[2][2] - mc[1][2] * mc[2][1]) - mc[0][1] * (mc[1][0] * mc[2][2] - mc[1][2] * mc[2][0])
            + mc[0][2] * (mc[1][0] * mc[2][1] - mc[1][1] * mc[2][0]))
            / det;
    }
    Some(out)
}

/// Lucas-Kanade refinement at one pyramid level. `flow` holds (x, y, z) per voxel.
fn lk_level(a: &[f64], b: &[f64], dims: [usize; 3], flow: &mut [[f64; 3]], p: &FlowParams, volumetric: bool) {
    let n = a.len();
    let axes = [volumetric, true, true];
    let ga = [gradient(a, dims, 2), gradient(a, dims, 1), if volumetric { gradient(a, dims, 0) } else { vec![0.0; n] }];
    for _ in 0..p.iterations {
        let warped: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let [_, ny, nx] = dims;
                let (k, j, i) = (idx / (ny * nx), (idx / nx) % ny, idx % nx);
                let f = flow[idx];
                trilinear(dims, [i as f64 + f[0], j as f64 + f[1], k as f64 + f[2]], |q| b[q])
            })
            .collect();
        let gw = [
            gradient(&warped, dims, 2),
            gradient(&warped, dims, 1),
            if volumetric { gradient(&warped, dims, 0) } else { vec![0.0; n] },
        ];
        let gx: Vec<[f64; 3]> = (0..n).map(|i| [0.5 * (ga[0][i] + gw[0][i]), 0.5 * (ga[1][i] + gw[1][i]), 0.5 * (ga[2][i] + gw[2][i])]).collect();
        let it: Vec<f64> = warped.iter().zip(a).map(|(w, a)| w - a).collect();
        // products: xx xy xz yy yz zz, then rhs x y z
        let mut prods: Vec<Vec<f64>> = (0..9).map(|_| vec![0.0; n]).collect();
        for i in 0..n {
            let g = gx[i];
            let vals = [g[0] * g[0], g[0] * g[1], g[0] * g[2], g[1] * g[1], g[1] * g[2], g[2] * g[2], -g[0] * it[i], -g[1] * it[i], -g[2] * it[i]];
            for (q, v) in vals.iter().enumerate() {
                prods[q][i] = *v;
            }
        }
        prods.par_iter_mut().for_each(|pr| box_sum(pr, dims, p.window, axes));
        let count = (p.window as f64).powi(if volumetric { 3 } else { 2 });
        let floor = p.min_eigen * count;
        flow.par_iter_mut().enumerate().for_each(|(i, f)| {
            let s = |q: usize| prods[q][i];
            let r = |c: usize| prods[6 + c][i];
            let step = if volumetric {
                solve3([[s(0), s(1), s(2)], [s(1), s(3), s(4)], [s(2), s(4), s(5)]], [r(0), r(1), r(2)], floor)
            } else {
                solve2(s(0), s(1), s(3), r(0), r(1), floor).map(|d| [d[0], d[1], 0.0])
            };
            if let Some(d) = step {
                for c in 0..3 {
                    f[c] += d[c];
                }
            }
        });
    }
}

fn flow_single(a: &[f64], b: &[f64], dims: [usize; 3], p: &FlowParams, volumetric: bool) -> Vec<[f64; 3]> {
    let mut pyramid = vec![(a.to_vec(), b.to_vec(), dims)];
    for _ in 1..p.levels.max(1) {
        let (pa, pb, d) = pyramid.last().unwrap();
        let axes = [volumetric && d[0] >= 8, d[1] >= 8, d[2] >= 8];
        if !axes[1] || !axes[2] {
            break;
        }
        let (ra, nd) = reduce(pa, *d, axes);
        let (rb, _) = reduce(pb, *d, axes);
        pyramid.push((ra, rb, nd));
    }
    let mut flow: Vec<[f64; 3]> = Vec::new();
    let mut prev_dims = [0usize; 3];
    for (la, lb, d) in pyramid.iter().rev() {
        let n: usize = d.iter().product();
        flow = if flow.is_empty() {
            vec![[0.0; 3]; n]
        } else {
            let scale = [d[2] as f64 / prev_dims[2] as f64, d[1] as f64 / prev_dims[1] as f64, d[0] as f64 / prev_dims[0] as f64];
            let coarse = FlowField { dims: prev_dims, flow: flow.iter().map(|f| f.map(|v| v as f32)).collect() };
            let [_, ny, nx] = *d;
            (0..n)
                .map(|idx| {
                    let (k, j, i) = (idx / (ny * nx), (idx / nx) % ny, idx % nx);
                    let pos = [(i as f64 + 0.5) / scale[0] - 0.5, (j as f64 + 0.5) / scale[1] - 0.5, (k as f64 + 0.5) / scale[2] - 0.5];
                    let f = coarse.sample(pos);
                    [f[0] * scale[0], f[1] * scale[1], f[2] * scale[2]]
                })
                .collect()
        };
        lk_level(la, lb, *d, &mut flow, p, volumetric);
        prev_dims = *d;
    }
    flow
}

/// Zero mean, unit variance; flat frames are only centered.
fn standardize(v: &[f32]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let sd = (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
    let s = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    v.iter().map(|&x| (x as f64 - m) * s).collect()
}

/// Coarse-to-fine Lucas-Kanade flow on globally standardized frames from `a` to `b` (so that `b(p + flow) ~ a(p)`).
pub fn optical_flow(a: &[f32], b: &[f32], dims: [usize; 3], params: &FlowParams) -> Result<FlowField> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n || n == 0 {
        return domain("flow frames must match the given dimensions");
    }
    if params.window < 3 || params.window % 2 == 0 {
        return domain("flow window must be odd and at least 3");
    }
    let fa = standardize(a);
    let fb = standardize(b);
    let flow = match params.mode {
        FlowMode::Volumetric => flow_single(&fa, &fb, dims, params, true),
        FlowMode::Axial => {
            let plane = dims[1] * dims[2];
            let slices: Vec<Vec<[f64; 3]>> = (0..dims[0])
                .into_par_iter()
                .map(|k| {
                    let r = k * plane..(k + 1) * plane;
                    flow_single(&fa[r.clone()], &fb[r], [1, dims[1], dims[2]], params, false)
                })
                .collect();
            slices.concat()
        }
    };
    Ok(FlowField { dims, flow: flow.iter().map(|f| f.map(|v| v as f32)).collect() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Voxel coordinates (x, y, z) at phases 0..N, plus the wrapped return to phase 0.
    pub positions: Vec<[f64; 3]>,
    /// Left the volume before completing the cycle.
    pub truncated: bool,
}

impl Trajectory {
    pub fn displacements(&self) -> Vec<[f64; 3]> {
        self.positions.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]]).collect()
    }

    pub fn closure_error(&self) -> f64 {
        let (a, b) = (self.positions[0], *self.positions.last().unwrap());
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub n_phases: usize,
    /// Voxel spacing (x, y, z) mm.
    pub spacing: [f64; 3],
    pub trajectories: Vec<Trajectory>,
}

/// Flow fields from each phase to the next, the last one wrapping to phase 0.
pub fn phase_flows(image4d: &Volume4D, params: &FlowParams) -> Result<Vec<FlowField>> {
    let n = image4d.n_phases();
    let dims = image4d.grid().dims;
    (0..n).map(|i| optical_flow(&image4d.phases[i].data, &image4d.phases[(i + 1) % n].data, dims, params)).collect()
}

/// Seeds on a regular stride inside the body of phase 0, advanced through the cycle.
pub fn track_trajectories(image4d: &Volume4D, stride: usize, params: &FlowParams) -> Result<TrajectorySet> {
    let n = image4d.n_phases();
    if n < 2 {
        return domain("trajectory tracking needs at least 2 phases");
    }
    if stride == 0 {
        return domain("seed stride must be positive");
    }
    let flows = phase_flows(image4d, params)?;
    let seeds = seed_grid(&image4d.phases[0], stride, &body_mask(&image4d.phases[0]).mask);
    Ok(advance(image4d, &flows, &seeds))
}

/// Seed voxels (x, y, z) on a stride grid where `mask` holds.
pub fn seed_grid(volume: &Volume3D, stride: usize, mask: &[bool]) -> Vec<[f64; 3]> {
    let [nz, ny, nx] = volume.dims();
    let h = stride / 2;
    let mut seeds = Vec::new();
    for k in (h.min(nz - 1)..nz).step_by(stride) {
        for j in (h..ny).step_by(stride) {
            for i in (h..nx).step_by(stride) {
                if mask[(k * ny + j) * nx + i] {
                    seeds.push([i as f64, j as f64, k as f64]);
                }
            }
        }
    }
    seeds
}

pub fn advance(image4d: &Volume4D, flows: &[FlowField], seeds: &[[f64; 3]]) -> TrajectorySet {
    let g = image4d.grid();
    let [nz, ny, nx] = g.dims;
    let inside = |p: [f64; 3]| {
        p[0] >= 0.0 && p[1] >= 0.0 && p[2] >= 0.0 && p[0] <= (nx - 1) as f64 && p[1] <= (ny - 1) as f64 && p[2] <= (nz - 1) as f64
    };
    let trajectories = seeds
        .par_iter()
        .map(|&s| {
            let mut positions = vec![s];
            let mut truncated = false;
            for f in flows {
                let p = *positions.last().unwrap();
                let d = f.sample(p);
                let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                if !inside(q) {
                    truncated = true;
                    break;
                }
                positions.push(q);
            }
            Trajectory { positions, truncated }
        })
        .collect();
    TrajectorySet { n_phases: image4d.n_phases(), spacing: [g.spacing[2], g.spacing[1], g.spacing[0]], trajectories }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisStats {
    /// Mean |dx|, |dy|, |dz| in mm for each phase transition.
    pub per_transition: Vec<[f64; 3]>,
    pub overall: [f64; 3],
}

impl AxisStats {
    pub fn in_plane(&self) -> f64 {
        0.5 * (self.overall[0] + self.overall[1])
    }
}

/// Mean absolute displacement per axis over complete trajectories.
pub fn axis_flow_stats(set: &TrajectorySet) -> Result<AxisStats> {
    let complete: Vec<&Trajectory> = set.trajectories.iter().filter(|t| !t.truncated).collect();
    if complete.is_empty() {
        return domain("no complete trajectories");
    }
    let n = complete[0].positions.len() - 1;
    let mut per = vec![[0.0; 3]; n];
    for t in &complete {
        for (i, d) in t.displacements().iter().enumerate() {
            for a in 0..3 {
                per[i][a] += (d[a] * set.spacing[a]).abs() / complete.len() as f64;
            }
        }
    }
    let mut overall = [0.0; 3];
    for p in &per {
        for a in 0..3 {
            overall[a] += p[a] / n as f64;
        }
    }
    Ok(AxisStats { per_transition: per, overall })
}

/// One row per trajectory: seed position then the flattened displacement sequence (mm).
pub fn trajectory_features(set: &TrajectorySet) -> Vec<Vec<f64>> {
    set.trajectories
        .iter()
        .map(|t| {
            let mut row = Vec::with_capacity(3 * (set.n_phases + 1));
            for i in 0..set.n_phases {
                let d = t.displacements().get(i).copied().unwrap_or([0.0; 3]);
                for a in 0..3 {
                    row.push(d[a] * set.spacing[a]);
                }
            }
            row
        })
        .collect()
}

pub fn export_trajectory_features(set: &TrajectorySet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["trajectory".to_string(), "seed_x".into(), "seed_y".into(), "seed_z".into(), "truncated".into()];
    for i in 0..set.n_phases {
        for a in ["x", "y", "z"] {
            header.push(format!("d{i}_{a}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for (k, (t, f)) in set.trajectories.iter().zip(trajectory_features(set)).enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(t.positions[0].iter().map(|v| format!("{v}")));
        rec.push(t.truncated.to_string());
        rec.extend(f.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// 16-bit binary PGM of a `h x w` image, values mapped linearly from `[lo, hi]`.
pub fn write_pgm16(path: &Path, data: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<()> {
    if data.len() != h * w {
        return domain("image size mismatch");
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &v in data {
        let q = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}
