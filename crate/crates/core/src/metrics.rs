//! Image and projection-domain scores: SSIM, ROI RMSE, NCC, and the masks they use.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::phantom::{Phantom4D, Tissue};
use crate::scanner::{forward_project, hu_to_mu, ProjectionSet};
use crate::volume::{GridSpec, Volume3D, Volume4D};

/// Default SSIM dynamic range: the 1500 HU span mapped to [0, 1] by the network normalization.
pub const SSIM_RANGE_HU: f64 = 1500.0;
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiLabel {
    Tumor,
    Lung,
    Global,
}

impl RoiLabel {
    pub fn name(&self) -> &'static str {
        match self {
            RoiLabel::Tumor => "tumor",
            RoiLabel::Lung => "lung",
            RoiLabel::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub label: RoiLabel,
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(label: RoiLabel, dims: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.iter().product::<usize>() {
            return domain("mask length does not match its dimensions");
        }
        Ok(RoiMask { label, dims, mask })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        RoiMask { label: RoiLabel::Global, dims, mask: vec![true; dims.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Mean voxel index (z, y, x).
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let [_, ny, nx] = self.dims;
        let mut s = [0.0; 3];
        let mut n = 0usize;
        for (idx, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            s[0] += (idx / (ny * nx)) as f64;
            s[1] += ((idx / nx) % ny) as f64;
            s[2] += (idx % nx) as f64;
            n += 1;
        }
        (n > 0).then(|| s.map(|v| v / n as f64))
    }

    pub fn dice(&self, other: &RoiMask) -> f64 {
        let inter = self.mask.iter().zip(&other.mask).filter(|(a, b)| **a && **b).count();
        let total = self.count() + other.count();
        if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 }
    }
}

#[derive(Debug, Clone)]
pub struct SsimResult {
    pub mean: f64,
    /// Same layout as the input; NaN where the window does not fit.
    pub map: Vec<f64>,
}

fn gaussian_window(window: usize) -> Vec<f64> {
    let sigma = window as f64 / 6.0;
    let c = (window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// SSIM map of one 2D image pair (`h x w`, x fastest) written into `map`.
fn ssim_slice(a: &[f32], b: &[f32], h: usize, w: usize, g: &[f64], range: f64, map: &mut [f64]) {
    let win = g.len();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (oh, ow) = (h + 1 - win, w + 1 - win);
    // horizontal pass: five moments at (row, valid col)
    let mut hz = vec![[0.0f64; 5]; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut m = [0.0; 5];
            for (t, &gt) in g.iter().enumerate() {
                let x = a[r * w + c + t] as f64;
                let y = b[r * w + c + t] as f64;
                m[0] += gt * x;
                m[1] += gt * y;
                m[2] += gt * x * x;
                m[3] += gt * y * y;
                m[4] += gt * x * y;
            }
            hz[r * ow + c] = m;
        }
    }
    map.fill(f64::NAN);
    let half = win / 2;
    for r in 0..oh {
        for c in 0..ow {
            let mut m = [0.0; 5];
            for (t, &gt) in g.iter().enumerate() {
                let v = &hz[(r + t) * ow + c];
                for q in 0..5 {
                    m[q] += gt * v[q];
                }
            }
            map[(r + half) * w + c + half] = ssim_formula(m, c1, c2);
        }
    }
}

fn ssim_formula(m: [f64; 5], c1: f64, c2: f64) -> f64 {
    let (mx, my) = (m[0], m[1]);
    let vx = m[2] - mx * mx;
    let vy = m[3] - my * my;
    let cov = m[4] - mx * my;
    let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    if den == 0.0 { 1.0 } else { num / den }
}

fn check_ssim_args(dims: [usize; 3], window: usize) -> Result<()> {
    if window < 1 || window % 2 == 0 {
        return domain("SSIM window must be odd");
    }
    if window > dims[1].min(dims[2]) {
        return domain(format!("SSIM window {window} larger than the image ({} x {})", dims[1], dims[2]));
    }
    Ok(())
}

/// Slice-wise (axial) SSIM with a Gaussian window, `sigma = window / 6`.
pub fn ssim(a: &Volume3D, b: &Volume3D, window: usize, dynamic_range: f64) -> Result<SsimResult> {
    if !a.same_shape(b) {
        return domain("SSIM needs volumes of equal shape");
    }
    ssim_raw(&a.data, &b.data, a.dims(), window, dynamic_range)
}

/// SSIM of flat arrays laid out as `dims = [slices, rows, cols]`.
pub fn ssim_raw(a: &[f32], b: &[f32], dims: [usize; 3], window: usize, dynamic_range: f64) -> Result<SsimResult> {
    check_ssim_args(dims, window)?;
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return domain("SSIM inputs do not match the given dimensions");
    }
    let [_, h, w] = dims;
    let g = gaussian_window(window);
    let mut map = vec![0.0; n];
    map.par_chunks_mut(h * w)
        .zip(a.par_chunks(h * w).zip(b.par_chunks(h * w)))
        .for_each(|(m, (sa, sb))| ssim_slice(sa, sb, h, w, &g, dynamic_range, m));
    let valid: Vec<f64> = map.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(SsimResult { mean, map })
}

/// Mean of the SSIM map over the ROI voxels where the window fits.
pub fn ssim_roi(a: &Volume3D, b: &Volume3D, roi: &RoiMask, window: usize, dynamic_range: f64) -> Result<f64> {
    check_roi(a, roi)?;
    let r = ssim(a, b, window, dynamic_range)?;
    let (s, n) = r
        .map
        .iter()
        .zip(&roi.mask)
        .filter(|(v, &m)| m && !v.is_nan())
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return domain("ROI has no voxels with a full SSIM window");
    }
    Ok(s / n as f64)
}

fn check_roi(a: &Volume3D, roi: &RoiMask) -> Result<()> {
    if roi.dims != a.dims() {
        return domain("ROI mask dimensions differ from the volume");
    }
    if roi.is_empty() {
        return domain(format!("{} ROI is empty", roi.label.name()));
    }
    Ok(())
}

pub fn rmse_hu(a: &Volume3D, b: &Volume3D, roi: &RoiMask) -> Result<f64> {
    if !a.same_shape(b) {
        return domain("RMSE needs volumes of equal shape");
    }
    check_roi(a, roi)?;
    let (s, n) = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&roi.mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), ((x, y), _)| (s + (*x as f64 - *y as f64).powi(2), n + 1));
    Ok((s / n as f64).sqrt())
}

/// Pearson correlation of two equally long arrays.
pub fn ncc(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return domain("NCC needs two non-empty arrays of equal length");
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("NCC of a constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Connected components (6-neighbourhood) of `mask`, largest first, as voxel lists.
fn components(mask: &[bool], dims: [usize; 3]) -> Vec<Vec<usize>> {
    let [nz, ny, nx] = dims;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let (k, j, i) = (idx / (ny * nx), (idx / nx) % ny, idx % nx);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 { visit(idx - 1) }
            if i + 1 < nx { visit(idx + 1) }
            if j > 0 { visit(idx - nx) }
            if j + 1 < ny { visit(idx + nx) }
            if k > 0 { visit(idx - ny * nx) }
            if k + 1 < nz { visit(idx + ny * nx) }
        }
        out.push(comp);
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

/// Fills every axial hole not connected to the slice border.
fn fill_holes_axial(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [_, ny, nx] = dims;
    let mut out = mask.to_vec();
    out.par_chunks_mut(ny * nx).for_each(|slice| {
        let mut outside = vec![false; ny * nx];
        let mut stack = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if (j == 0 || i == 0 || j == ny - 1 || i == nx - 1) && !slice[j * nx + i] {
                    outside[j * nx + i] = true;
                    stack.push(j * nx + i);
                }
            }
        }
        while let Some(p) = stack.pop() {
            let (j, i) = (p / nx, p % nx);
            let mut nbrs = [None; 4];
            if i > 0 { nbrs[0] = Some(p - 1) }
            if i + 1 < nx { nbrs[1] = Some(p + 1) }
            if j > 0 { nbrs[2] = Some(p - nx) }
            if j + 1 < ny { nbrs[3] = Some(p + nx) }
            for q in nbrs.into_iter().flatten() {
                if !slice[q] && !outside[q] {
                    outside[q] = true;
                    stack.push(q);
                }
            }
        }
        for (s, o) in slice.iter_mut().zip(&outside) {
            *s = !o;
        }
    });
    out
}

fn ball_offsets(radius: isize) -> Vec<[isize; 3]> {
    let mut v = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dz * dz + dy * dy + dx * dx <= radius * radius {
                    v.push([dz, dy, dx]);
                }
            }
        }
    }
    v
}

/// Dilation (`any`) or erosion (`all`) with a ball; outside the grid counts as background for
/// dilation and as foreground for erosion.
fn morph(mask: &[bool], dims: [usize; 3], radius: isize, dilate: bool) -> Vec<bool> {
    let [nz, ny, nx] = dims;
    let offs = ball_offsets(radius);
    let mut out = vec![false; mask.len()];
    out.par_chunks_mut(ny * nx).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let hit = |o: &[isize; 3]| {
                    let (z, y, x) = (k as isize + o[0], j as isize + o[1], i as isize + o[2]);
                    if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
                        !dilate
                    } else {
                        mask[(z as usize * ny + y as usize) * nx + x as usize]
                    }
                };
                slice[j * nx + i] = if dilate { offs.iter().any(hit) } else { offs.iter().all(hit) };
            }
        }
    });
    out
}

/// Largest connected region above -300 HU with its axial holes (lungs) filled.
pub fn body_mask(volume: &Volume3D) -> RoiMask {
    let dims = volume.dims();
    let above: Vec<bool> = volume.data.iter().map(|&v| v > -300.0).collect();
    let mut mask = vec![false; above.len()];
    if let Some(body) = components(&above, dims).first() {
        body.iter().for_each(|&i| mask[i] = true);
    }
    RoiMask { label: RoiLabel::Global, dims, mask: fill_holes_axial(&mask, dims) }
}

/// Threshold segmentation of the lungs: voxels below -400 HU inside the axial body
/// outline, closed with a radius-2 ball, two largest components kept. The second
/// value is a warning when nothing was found.
pub fn lung_mask(volume: &Volume3D) -> (RoiMask, Option<String>) {
    let dims = volume.dims();
    let inside = body_mask(volume).mask;
    let cand: Vec<bool> = volume.data.iter().zip(&inside).map(|(&v, &b)| b && v < -400.0).collect();
    let closed = morph(&morph(&cand, dims, 2, true), dims, 2, false);
    let closed: Vec<bool> = closed.iter().zip(&inside).map(|(&c, &b)| c && b).collect();
    let mut mask = vec![false; closed.len()];
    for comp in components(&closed, dims).iter().take(2) {
        comp.iter().for_each(|&i| mask[i] = true);
    }
    let roi = RoiMask { label: RoiLabel::Lung, dims, mask };
    let warning = roi.is_empty().then(|| "no lung region found".to_string());
    (roi, warning)
}

/// Exact membership in the phantom's tumor ellipsoids at `amplitude`.
pub fn tumor_mask_from_phantom(phantom: &Phantom4D, amplitude: f64, grid: &GridSpec) -> Result<RoiMask> {
    if !(0.0..=1.0).contains(&amplitude) {
        return domain(format!("amplitude {amplitude} outside [0, 1]"));
    }
    let tumors: Vec<_> = phantom.find(Tissue::Tumor).map(|e| e.placed(amplitude)).collect();
    if tumors.is_empty() {
        return domain(format!("phantom {} has no tumor", phantom.name));
    }
    let [nz, ny, nx] = grid.dims;
    let mut mask = vec![false; grid.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.world(k, j, i);
                mask[(k * ny + j) * nx + i] = tumors.iter().any(|t| t.contains(p));
            }
        }
    }
    Ok(RoiMask { label: RoiLabel::Tumor, dims: grid.dims, mask })
}

/// Soft-tissue torso voxels away from tissue boundaries and from the axial ends
/// of the grid, where cone-beam data are incomplete.
pub fn water_region(phantom: &Phantom4D, grid: &GridSpec) -> Result<RoiMask> {
    let torso = phantom.tissue_mask(Tissue::Torso, 0.0, grid)?;
    let mut mask = morph(&torso, grid.dims, 1, false);
    let [nz, ny, nx] = grid.dims;
    let margin = nz / 10;
    for k in (0..margin).chain(nz - margin..nz) {
        mask[k * ny * nx..(k + 1) * ny * nx].fill(false);
    }
    let roi = RoiMask { label: RoiLabel::Global, dims: grid.dims, mask };
    if roi.is_empty() {
        return domain(format!("phantom {} has no water region on this grid", phantom.name));
    }
    Ok(roi)
}

/// Mean value inside `roi`.
pub fn roi_mean(volume: &Volume3D, roi: &RoiMask) -> Result<f64> {
    check_roi(volume, roi)?;
    let sum: f64 = volume.data.iter().zip(&roi.mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum();
    Ok(sum / roi.count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub phase: usize,
    pub roi: RoiLabel,
    pub ssim: f64,
    pub rmse_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub phase: usize,
    pub ssim: f64,
    pub ncc: f64,
}

/// SSIM and RMSE per phase and ROI; `rois[p]` holds the regions of phase `p`.
pub fn image_scores(
    recovered: &Volume4D,
    truth: &Volume4D,
    rois: &[Vec<RoiMask>],
    window: usize,
    dynamic_range: f64,
) -> Result<Vec<ImageScore>> {
    if recovered.n_phases() != truth.n_phases() || rois.len() != truth.n_phases() {
        return domain("phase counts differ");
    }
    let mut out = Vec::new();
    for (p, (a, b)) in recovered.phases.iter().zip(&truth.phases).enumerate() {
        for roi in &rois[p] {
            out.push(ImageScore {
                phase: p,
                roi: roi.label,
                ssim: ssim_roi(a, b, roi, window, dynamic_range)?,
                rmse_hu: rmse_hu(a, b, roi)?,
            });
        }
    }
    Ok(out)
}

/// Reprojects each recovered phase (HU) at the reference views of that phase and
/// scores it against the reference projection. SSIM uses the reference set's value span.
pub fn projection_domain_eval(recovered: &Volume4D, reference: &ProjectionSet, mu_water: f64) -> Result<Vec<ViewScore>> {
    reference.validate()?;
    let n = recovered.n_phases();
    let phases = reference
        .views
        .iter()
        .map(|v| match v.phase {
            Some(p) if p < n => Ok(p),
            Some(p) => domain(format!("view phase {p} but only {n} recovered phases")),
            None => domain("reference view has no phase label"),
        })
        .collect::<Result<Vec<_>>>()?;
    let mus: Vec<Volume3D> = recovered.phases.iter().map(|v| hu_to_mu(v, mu_water)).collect();
    let (lo, hi) = reference
        .views
        .iter()
        .flat_map(|v| v.data.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = (hi - lo) as f64;
    let [nu, nv] = reference.geometry.detector_channels;
    let window = SSIM_WINDOW.min(nu.min(nv) | 1);
    let window = if window > nu.min(nv) { window - 2 } else { window };
    reference
        .views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let p = forward_project(&mus[phases[k]], &reference.geometry, v.angle)?;
            let s = ssim_raw(&p, &v.data, [1, nv, nu], window, range)?;
            let c = match ncc(&p, &v.data) {
                Ok(c) => c,
                Err(Error::Degenerate(_)) => if p == v.data { 1.0 } else { 0.0 },
                Err(e) => return Err(e),
            };
            Ok(ViewScore { view: k, phase: phases[k], ssim: s.mean, ncc: c })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Integrity(format!("csv: {other:?}")),
    }
}
