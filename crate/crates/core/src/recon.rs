//! FDK and gated FDK for the half-fan circular geometry.
//!
//! Filtering runs on a virtual detector in the isocenter plane, channel spacing
//! `du / M` with `M = sdd / sad`. Output volumes are in attenuation (mm^-1)
//! unless converted with [`hu_convert`].

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::respiration::PhaseMap;
use crate::scanner::{ProjectionSet, ScanGeometry, MU_WATER};
use crate::volume::{GridSpec, Volume3D, Volume4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    RamLak,
    SheppLogan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSpec {
    pub kernel: Kernel,
    pub zero_pad_to: usize,
}

impl FilterSpec {
    pub fn new(kernel: Kernel, channels: usize) -> Self {
        FilterSpec { kernel, zero_pad_to: (2 * channels).next_power_of_two() }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels < 2 {
            return domain("ramp filter needs at least 2 channels");
        }
        if !self.zero_pad_to.is_power_of_two() || self.zero_pad_to < 2 * channels {
            return domain(format!("pad length {} must be a power of two >= {}", self.zero_pad_to, 2 * channels));
        }
        Ok(())
    }

    /// Spatial kernel tap `h(n)` for sample spacing `delta`.
    pub fn tap(&self, n: i64, delta: f64) -> f64 {
        let d2 = delta * delta;
        match self.kernel {
            Kernel::RamLak => {
                if n == 0 {
                    1.0 / (4.0 * d2)
                } else if n % 2 == 0 {
                    0.0
                } else {
                    -1.0 / (PI * n as f64 * delta).powi(2)
                }
            }
            Kernel::SheppLogan => -2.0 / (PI * PI * d2 * (4.0 * (n * n) as f64 - 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconOptions {
    pub kernel: Kernel,
    pub mu_water: f64,
    /// Apply the half-fan redundancy ramp. Turning this off is only useful for
    /// showing the seam it removes.
    pub halffan: bool,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions { kernel: Kernel::RamLak, mu_water: MU_WATER, halffan: true }
    }
}

/// HU = 1000 (mu - mu_w) / mu_w.
pub fn hu_convert(volume_mu: &Volume3D, mu_water: f64) -> Volume3D {
    volume_mu.map(|mu| (1000.0 * (mu as f64 - mu_water) / mu_water) as f32)
}

/// Cosine weight for a ray hitting the isocenter plane at `(u, v)`.
pub fn cosine_weight(sad: f64, u: f64, v: f64) -> f64 {
    sad / (sad * sad + u * u + v * v).sqrt()
}

pub fn preweight(data: &[f32], geometry: &ScanGeometry) -> Result<Vec<f32>> {
    geometry.validate()?;
    let [nu, nv] = geometry.detector_channels;
    check_len(data, nu * nv)?;
    let m = geometry.magnification();
    let mut out = data.to_vec();
    for iv in 0..nv {
        let v = geometry.channel_v(iv) / m;
        for iu in 0..nu {
            out[iv * nu + iu] *= cosine_weight(geometry.sad, geometry.channel_u(iu) / m, v) as f32;
        }
    }
    Ok(out)
}

/// Redundancy weight at detector coordinate `u` (mm, detector plane). Over the
/// doubly-sampled band `[-w, w]`, `w = W/2 - |offset|`, a sin^2 ramp runs from 0 on
/// the truncated side to 1 on the wide side, so `w(u) + w(-u) = 1`.
pub fn halffan_weight_at(geometry: &ScanGeometry, u: f64) -> Result<f64> {
    let half = 0.5 * geometry.detector_size[0];
    let off = geometry.detector_offset_u;
    if off.abs() > half {
        return domain(format!("detector offset {off} exceeds half the detector width {half}"));
    }
    if off == 0.0 {
        return Ok(1.0);
    }
    let u = if off > 0.0 { u } else { -u };
    let w = half - off.abs();
    Ok(if u <= -w {
        if w == 0.0 && u == 0.0 { 0.5 } else { 0.0 }
    } else if u >= w {
        1.0
    } else {
        (0.25 * PI * (u / w + 1.0)).sin().powi(2)
    })
}

pub fn halffan_weight(data: &[f32], geometry: &ScanGeometry) -> Result<Vec<f32>> {
    geometry.validate()?;
    let [nu, nv] = geometry.detector_channels;
    check_len(data, nu * nv)?;
    let weights = (0..nu).map(|iu| halffan_weight_at(geometry, geometry.channel_u(iu))).collect::<Result<Vec<_>>>()?;
    let mut out = data.to_vec();
    for row in out.chunks_mut(nu) {
        for (x, w) in row.iter_mut().zip(&weights) {
            *x *= *w as f32;
        }
    }
    Ok(out)
}

fn check_len(data: &[f32], n: usize) -> Result<()> {
    if data.len() != n {
        return domain(format!("projection has {} values, detector has {n}", data.len()));
    }
    Ok(())
}

/// Row-wise ramp filter with a precomputed kernel spectrum.
pub struct RampFilter {
    nu: usize,
    pad: usize,
    delta: f64,
    spectrum: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(spec: FilterSpec, nu: usize, delta: f64) -> Result<Self> {
        spec.validate(nu)?;
        if !(delta > 0.0) {
            return domain("channel spacing must be positive");
        }
        let pad = spec.zero_pad_to;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(pad);
        let inverse = planner.plan_fft_inverse(pad);
        let mut k = vec![Complex::new(0.0, 0.0); pad];
        k[0].re = spec.tap(0, delta);
        for n in 1..nu {
            let h = spec.tap(n as i64, delta);
            k[n].re = h;
            k[pad - n].re = h;
        }
        forward.process(&mut k);
        Ok(RampFilter { nu, pad, delta, spectrum: k.iter().map(|c| c.re).collect(), forward, inverse })
    }

    /// Filters every row of `data` (rows of `nu` values) in place.
    pub fn apply(&self, data: &mut [f32]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.pad];
        let scale = self.delta / self.pad as f64;
        for row in data.chunks_mut(self.nu) {
            for (b, &x) in buf.iter_mut().zip(row.iter()) {
                *b = Complex::new(x as f64, 0.0);
            }
            buf[self.nu..].fill(Complex::new(0.0, 0.0));
            self.forward.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&self.spectrum) {
                *b *= *h;
            }
            self.inverse.process(&mut buf);
            for (x, b) in row.iter_mut().zip(&buf) {
                *x = (b.re * scale) as f32;
            }
        }
    }
}

/// Ramp-filters each row (`nu` samples at spacing `delta`).
pub fn ramp_filter(data: &[f32], nu: usize, spec: FilterSpec, delta: f64) -> Result<Vec<f32>> {
    if nu == 0 || data.len() % nu != 0 {
        return domain("projection length is not a multiple of the row length");
    }
    let f = RampFilter::new(spec, nu, delta)?;
    let mut out = data.to_vec();
    f.apply(&mut out);
    Ok(out)
}

/// Weighted and filtered views, ready for backprojection. With a displaced
/// detector the rows are zero-extended on the truncated side before filtering so
/// that `geometry` describes a detector symmetric about the central ray; the
/// filtered tails beyond the physical edge are part of the reconstruction.
pub struct FilteredViews {
    pub geometry: ScanGeometry,
    pub angles: Vec<f64>,
    pub data: Vec<Vec<f32>>,
    /// The physical detector was displaced.
    pub halffan: bool,
}

/// Channels added on the truncated side and the resulting virtual geometry.
fn virtual_detector(g: &ScanGeometry) -> (usize, ScanGeometry) {
    let du = g.du();
    let pad = (2.0 * g.detector_offset_u.abs() / du).round() as usize;
    let nu = g.detector_channels[0] + pad;
    let shift = 0.5 * pad as f64 * du * g.detector_offset_u.signum();
    let virt = ScanGeometry {
        detector_channels: [nu, g.detector_channels[1]],
        detector_size: [nu as f64 * du, g.detector_size[1]],
        detector_offset_u: g.detector_offset_u - shift,
        ..*g
    };
    (pad, virt)
}

pub fn filter_views(projections: &ProjectionSet, opts: &ReconOptions) -> Result<FilteredViews> {
    projections.validate()?;
    let g = projections.geometry;
    let [nu, nv] = g.detector_channels;
    let m = g.magnification();
    let (pad, virt) = virtual_detector(&g);
    let vnu = virt.detector_channels[0];
    // physical channels start at this virtual index
    let first = if g.detector_offset_u > 0.0 { pad } else { 0 };
    let filter = RampFilter::new(FilterSpec::new(opts.kernel, vnu), vnu, g.du() / m)?;
    let mut weights = vec![0f32; nu * nv];
    for iv in 0..nv {
        for iu in 0..nu {
            let u = g.channel_u(iu);
            let hf = if opts.halffan { halffan_weight_at(&g, u)? } else { 1.0 };
            weights[iv * nu + iu] = (cosine_weight(g.sad, u / m, g.channel_v(iv) / m) * hf) as f32;
        }
    }
    let data = projections
        .views
        .par_iter()
        .map(|v| {
            let mut d = vec![0f32; vnu * nv];
            for iv in 0..nv {
                let src = &v.data[iv * nu..(iv + 1) * nu];
                let w = &weights[iv * nu..(iv + 1) * nu];
                for (o, (x, w)) in d[iv * vnu + first..iv * vnu + first + nu].iter_mut().zip(src.iter().zip(w)) {
                    *o = x * w;
                }
            }
            filter.apply(&mut d);
            d
        })
        .collect();
    Ok(FilteredViews { geometry: virt, angles: projections.angles(), data, halffan: g.detector_offset_u != 0.0 })
}

/// Each ray is measured twice over a full turn unless the half-fan weights
/// already split the redundancy.
fn redundancy(opts: &ReconOptions, halffan: bool) -> f64 {
    if opts.halffan && halffan { 1.0 } else { 0.5 }
}

/// Voxel-driven backprojection of the selected views, each scaled by `weight`.
pub fn backproject(filtered: &FilteredViews, views: &[usize], weight: f64, grid: &GridSpec) -> Result<Volume3D> {
    grid.validate()?;
    let g = &filtered.geometry;
    let [nu, nv] = g.detector_channels;
    let [_, ny, nx] = grid.dims;
    let m = g.magnification();
    let (du, dv) = (g.du(), g.dv());
    let cu = (nu as f64 - 1.0) / 2.0;
    let cv = (nv as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = views.iter().map(|&k| filtered.angles[k].sin_cos()).collect();
    let mut out = Volume3D::zeros(*grid);
    out.data.par_chunks_mut(ny * nx).enumerate().for_each(|(kz, slice)| {
        let z = grid.origin[0] + kz as f64 * grid.spacing[0];
        let mut acc = vec![0f64; ny * nx];
        for (&k, &(s, c)) in views.iter().zip(&trig) {
            let p = &filtered.data[k];
            for j in 0..ny {
                let y = grid.origin[1] + j as f64 * grid.spacing[1];
                for i in 0..nx {
                    let x = grid.origin[2] + i as f64 * grid.spacing[2];
                    let big_u = g.sad - (x * c + y * s);
                    let mag = g.sad / big_u;
                    let fu = ((-x * s + y * c) * mag * m - g.detector_offset_u) / du + cu;
                    let fv = z * mag * m / dv + cv;
                    if fu < 0.0 || fv < 0.0 || fu > (nu - 1) as f64 || fv > (nv - 1) as f64 {
                        continue;
                    }
                    let (iu, iv) = ((fu as usize).min(nu - 2), (fv as usize).min(nv - 2));
                    let (au, av) = (fu - iu as f64, fv - iv as f64);
                    let r0 = iv * nu + iu;
                    let r1 = r0 + nu;
                    let val = (1.0 - av) * ((1.0 - au) * p[r0] as f64 + au * p[r0 + 1] as f64)
                        + av * ((1.0 - au) * p[r1] as f64 + au * p[r1 + 1] as f64);
                    acc[j * nx + i] += mag * mag * val;
                }
            }
        }
        for (o, a) in slice.iter_mut().zip(&acc) {
            *o = (a * weight) as f32;
        }
    });
    Ok(out)
}

/// FDK of all views, attenuation domain.
pub fn fdk_mu(projections: &ProjectionSet, grid: &GridSpec, opts: &ReconOptions) -> Result<Volume3D> {
    if projections.views.len() < 2 {
        return domain("FDK needs at least 2 views");
    }
    let filtered = filter_views(projections, opts)?;
    fdk_filtered(&filtered, grid, opts)
}

pub fn fdk_filtered(filtered: &FilteredViews, grid: &GridSpec, opts: &ReconOptions) -> Result<Volume3D> {
    let n = filtered.data.len();
    let all: Vec<usize> = (0..n).collect();
    let w = 2.0 * PI / n as f64 * redundancy(opts, filtered.halffan);
    backproject(filtered, &all, w, grid)
}

/// FDK in HU.
pub fn fdk(projections: &ProjectionSet, grid: &GridSpec, opts: &ReconOptions) -> Result<Volume3D> {
    Ok(hu_convert(&fdk_mu(projections, grid, opts)?, opts.mu_water))
}

/// Reconstruction from the views of one phase only, each weighted `2 pi / count`.
pub fn gated_fdk_filtered(
    filtered: &FilteredViews,
    phase_map: &PhaseMap,
    phase: usize,
    grid: &GridSpec,
    opts: &ReconOptions,
) -> Result<Volume3D> {
    if phase_map.phase_of_view.len() != filtered.data.len() {
        return domain("phase map does not match the projection set");
    }
    if phase >= phase_map.n_phases {
        return domain(format!("phase {phase} out of range for {} phases", phase_map.n_phases));
    }
    let views = phase_map.views_of(phase);
    if views.is_empty() {
        return Err(Error::Domain(format!("phase {phase} has no views")));
    }
    let w = 2.0 * PI / views.len() as f64 * redundancy(opts, filtered.halffan);
    backproject(filtered, &views, w, grid)
}

pub fn gated_fdk_mu(
    projections: &ProjectionSet,
    phase_map: &PhaseMap,
    phase: usize,
    grid: &GridSpec,
    opts: &ReconOptions,
) -> Result<Volume3D> {
    let filtered = filter_views(projections, opts)?;
    gated_fdk_filtered(&filtered, phase_map, phase, grid, opts)
}

pub fn gated_fdk(
    projections: &ProjectionSet,
    phase_map: &PhaseMap,
    phase: usize,
    grid: &GridSpec,
    opts: &ReconOptions,
) -> Result<Volume3D> {
    Ok(hu_convert(&gated_fdk_mu(projections, phase_map, phase, grid, opts)?, opts.mu_water))
}

/// Phase map stored in the projection labels.
pub fn phase_map_from_labels(projections: &ProjectionSet, n_phases: usize) -> Result<PhaseMap> {
    let phase_of_view = projections
        .views
        .iter()
        .map(|v| match v.phase {
            Some(p) if p < n_phases => Ok(p),
            Some(p) => domain(format!("view phase {p} out of range for {n_phases} phases")),
            None => domain("projection views carry no phase labels"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseMap { phase_of_view, n_phases })
}

/// Average image plus every phase image, in HU. Views are filtered once.
pub fn reconstruct_all(
    projections: &ProjectionSet,
    phase_map: &PhaseMap,
    grid: &GridSpec,
    opts: &ReconOptions,
) -> Result<(Volume3D, Volume4D)> {
    let filtered = filter_views(projections, opts)?;
    let ave = hu_convert(&fdk_filtered(&filtered, grid, opts)?, opts.mu_water);
    let phases = (0..phase_map.n_phases)
        .map(|i| Ok(hu_convert(&gated_fdk_filtered(&filtered, phase_map, i, grid, opts)?, opts.mu_water)))
        .collect::<Result<Vec<_>>>()?;
    Ok((ave, Volume4D::new(phases)?))
}
