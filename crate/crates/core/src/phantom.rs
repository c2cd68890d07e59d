//! Time-resolved ellipsoid thorax phantoms driven by a breathing amplitude.
//!
//! Amplitude 0 is end-exhale and amplitude 1 is end-inhale. Each ellipsoid is
//! displaced by `amplitude * motion_amplitude` and its semi-axes are scaled by
//! `1 + amplitude * axis_scaling`. Voxels take the value of the last ellipsoid
//! (in paint order) containing their center; background is air.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::volume::{GridSpec, Volume3D, Volume4D};

pub const AIR_HU: f32 = -1000.0;
pub const WATER_HU: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tissue {
    Torso,
    Lung,
    Heart,
    Diaphragm,
    Spine,
    Rib,
    Tumor,
    Vessel,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub label: Tissue,
    /// `[x, y, z]` in mm.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Z-Y-X Euler angles in radians: `R = Rz(a) * Ry(b) * Rx(c)`.
    pub rotation: [f64; 3],
    pub value: f32,
    pub motion_amplitude: [f64; 3],
    pub axis_scaling: [f64; 3],
}

impl Ellipsoid {
    pub fn new(label: Tissue, center: [f64; 3], semi_axes: [f64; 3], value: f32) -> Self {
        Ellipsoid {
            label,
            center,
            semi_axes,
            rotation: [0.0; 3],
            value,
            motion_amplitude: [0.0; 3],
            axis_scaling: [0.0; 3],
        }
    }

    pub fn with_motion(mut self, motion: [f64; 3], scaling: [f64; 3]) -> Self {
        self.motion_amplitude = motion;
        self.axis_scaling = scaling;
        self
    }

    pub fn with_rotation(mut self, rotation: [f64; 3]) -> Self {
        self.rotation = rotation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.semi_axes.iter().any(|&s| !(s > 0.0)) {
            return domain(format!("{:?}: semi-axes must be positive", self.label));
        }
        if self.rotation.iter().any(|r| r.abs() > std::f64::consts::PI) {
            return domain(format!("{:?}: rotation components must lie in [-pi, pi]", self.label));
        }
        if !(-1000.0..=1500.0).contains(&self.value) {
            return domain(format!("{:?}: HU value {} outside [-1000, 1500]", self.label, self.value));
        }
        if self.axis_scaling.iter().any(|&s| s <= -1.0) {
            return domain(format!("{:?}: axis scaling must stay above -1", self.label));
        }
        Ok(())
    }

    pub fn center_at(&self, amplitude: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + amplitude * self.motion_amplitude[a])
    }

    pub fn semi_axes_at(&self, amplitude: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.semi_axes[a] * (1.0 + amplitude * self.axis_scaling[a]))
    }

    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    }

    /// Precomputed membership test at a fixed amplitude.
    pub fn placed(&self, amplitude: f64) -> PlacedEllipsoid {
        let r = self.rotation_matrix();
        let axes = self.semi_axes_at(amplitude);
        PlacedEllipsoid {
            center: self.center_at(amplitude),
            // rows of R^T scaled by 1/axis, so q_a = <row_a, p - c>
            rows: [0, 1, 2].map(|a| [r[0][a] / axes[a], r[1][a] / axes[a], r[2][a] / axes[a]]),
            radius: axes.iter().cloned().fold(0.0, f64::max),
            value: self.value,
        }
    }

    pub fn contains(&self, p: [f64; 3], amplitude: f64) -> bool {
        self.placed(amplitude).contains(p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlacedEllipsoid {
    pub center: [f64; 3],
    rows: [[f64; 3]; 3],
    pub radius: f64,
    pub value: f32,
}

impl PlacedEllipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for row in &self.rows {
            let q = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            s += q * q;
        }
        s <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phantom4D {
    pub name: String,
    /// Paint order: later ellipsoids override earlier ones.
    pub body: Vec<Ellipsoid>,
}

fn check_amplitude(amplitude: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&amplitude) {
        return domain(format!("breathing amplitude {amplitude} outside [0, 1]"));
    }
    Ok(())
}

impl Phantom4D {
    /// The canonical built-in thorax. All numbers are this project's own choices.
    ///
    /// Torso 300 x 220 mm (0 HU) extending past any desk grid in z, two lungs
    /// (-800 HU) that stretch slightly on inhale and carry small vessel blobs
    /// (40 HU) moving with them, a heart, a diaphragm dome
    /// (20 HU) that drops 15 mm at end-inhale, spine, eight rib rods (700 HU)
    /// and a 10 mm tumor (30 HU) inside the right lung.
    pub fn thorax_v1() -> Self {
        let lung_motion = [0.0, 0.0, -5.0];
        let lung_scale = [0.03, 0.05, 0.08];
        let mut body = vec![
            Ellipsoid::new(Tissue::Torso, [0.0, 0.0, 0.0], [150.0, 110.0, 400.0], WATER_HU),
            Ellipsoid::new(Tissue::Lung, [-65.0, 0.0, 15.0], [50.0, 65.0, 75.0], -800.0)
                .with_motion(lung_motion, lung_scale),
            Ellipsoid::new(Tissue::Lung, [65.0, 0.0, 15.0], [50.0, 65.0, 75.0], -800.0)
                .with_motion(lung_motion, lung_scale),
            Ellipsoid::new(Tissue::Heart, [15.0, -25.0, -15.0], [40.0, 35.0, 45.0], 40.0)
                .with_rotation([0.3, 0.0, 0.0])
                .with_motion([0.0, 0.0, -6.0], [0.0; 3]),
            Ellipsoid::new(Tissue::Diaphragm, [0.0, 0.0, -95.0], [140.0, 100.0, 75.0], 20.0)
                .with_motion([0.0, 0.0, -15.0], [0.0; 3]),
            Ellipsoid::new(Tissue::Spine, [0.0, -88.0, 0.0], [14.0, 14.0, 400.0], 400.0),
        ];
        for lung_x in [-65.0, 65.0] {
            let c = [lung_x, 0.0, 15.0];
            let axes = [50.0, 65.0, 75.0];
            for (level, nz) in [-0.1f64, 0.3, 0.65].into_iter().enumerate() {
                for nx in [-0.45, 0.45] {
                    for ny in [-0.55, 0.0, 0.55] {
                        let n = [nx + 0.1 * level as f64, ny, nz];
                        if n.iter().map(|v| v * v).sum::<f64>() > 0.64 {
                            continue;
                        }
                        let center = [0, 1, 2].map(|a| c[a] + n[a] * axes[a]);
                        let motion = [0, 1, 2].map(|a| lung_motion[a] + lung_scale[a] * n[a] * axes[a]);
                        body.insert(3, Ellipsoid::new(Tissue::Vessel, center, [5.0; 3], 40.0).with_motion(motion, [0.0; 3]));
                    }
                }
            }
        }
        for deg in [20.0f64, 55.0, 125.0, 160.0, 200.0, 235.0, 305.0, 340.0] {
            let t = deg.to_radians();
            body.push(Ellipsoid::new(Tissue::Rib, [136.0 * t.cos(), 96.0 * t.sin(), 0.0], [6.0, 6.0, 400.0], 700.0));
        }
        body.push(
            Ellipsoid::new(Tissue::Tumor, [-60.0, 10.0, 35.0], [10.0, 10.0, 10.0], 30.0)
                .with_motion([0.0, 2.0, -8.0], [0.0; 3]),
        );
        Phantom4D { name: "thorax-v1".into(), body }
    }

    /// A seeded anatomical variant of thorax-v1 used to build training sets.
    /// Variant 0 is thorax-v1 itself.
    pub fn thorax_variant(variant: u64) -> Self {
        let mut p = Self::thorax_v1();
        if variant == 0 {
            return p;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x7468_6f72 ^ variant);
        let sx: f64 = rng.random_range(0.9..1.05);
        let sy: f64 = rng.random_range(0.9..1.05);
        let excursion: f64 = rng.random_range(10.0..20.0);
        let tumor_r: f64 = rng.random_range(6.0..12.0);
        let right_side = rng.random_bool(0.5);
        let tumor_z: f64 = rng.random_range(15.0..45.0);
        let tumor_y: f64 = rng.random_range(-20.0..20.0);
        let rib_phase: f64 = rng.random_range(-10.0..10.0);
        for e in &mut p.body {
            e.center[0] *= sx;
            e.center[1] *= sy;
            match e.label {
                Tissue::Torso | Tissue::Lung | Tissue::Heart | Tissue::Diaphragm => {
                    e.semi_axes[0] *= sx;
                    e.semi_axes[1] *= sy;
                }
                Tissue::Rib => {
                    let t = e.center[1].atan2(e.center[0]) + rib_phase.to_radians();
                    e.center = [136.0 * sx * t.cos(), 96.0 * sy * t.sin(), 0.0];
                }
                _ => {}
            }
            if e.label == Tissue::Diaphragm {
                e.motion_amplitude[2] = -excursion;
            }
        }
        let lung_x = if right_side { -65.0 * sx } else { 65.0 * sx };
        let tumor = p.body.iter_mut().find(|e| e.label == Tissue::Tumor).unwrap();
        tumor.center = [lung_x + if right_side { 5.0 } else { -5.0 }, tumor_y, tumor_z];
        tumor.semi_axes = [tumor_r; 3];
        tumor.motion_amplitude = [0.0, 2.0, -0.5 * excursion];
        p.name = format!("thorax-v1/variant-{variant}");
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.body.iter().try_for_each(Ellipsoid::validate)
    }

    /// Index (paint order) of the ellipsoid that owns each voxel, `None` for air.
    pub fn label_volume(&self, amplitude: f64, grid: &GridSpec) -> Result<Vec<Option<u16>>> {
        check_amplitude(amplitude)?;
        grid.validate()?;
        let placed: Vec<_> = self.body.iter().map(|e| e.placed(amplitude)).collect();
        let [nz, ny, nx] = grid.dims;
        let mut out = vec![None; grid.len()];
        out.par_chunks_mut(ny * nx).enumerate().for_each(|(k, slab)| {
            let z = grid.world(k, 0, 0)[2];
            // ellipsoids whose bounding sphere reaches this slice, back to front
            let active: Vec<(u16, &PlacedEllipsoid)> = placed
                .iter()
                .enumerate()
                .rev()
                .filter(|(_, e)| (z - e.center[2]).abs() <= e.radius)
                .map(|(i, e)| (i as u16, e))
                .collect();
            for j in 0..ny {
                for i in 0..nx {
                    let p = grid.world(k, j, i);
                    slab[j * nx + i] = active.iter().find(|(_, e)| e.contains(p)).map(|(idx, _)| *idx);
                }
            }
        });
        debug_assert_eq!(out.len(), nz * ny * nx);
        Ok(out)
    }

    pub fn sample_volume(&self, amplitude: f64, grid: &GridSpec) -> Result<Volume3D> {
        let labels = self.label_volume(amplitude, grid)?;
        let data = labels.iter().map(|l| l.map_or(AIR_HU, |i| self.body[i as usize].value)).collect();
        Ok(Volume3D { grid: *grid, data })
    }

    /// Boolean support of every ellipsoid with the given tissue label, after paint resolution.
    pub fn tissue_mask(&self, tissue: Tissue, amplitude: f64, grid: &GridSpec) -> Result<Vec<bool>> {
        let labels = self.label_volume(amplitude, grid)?;
        Ok(labels.iter().map(|l| l.is_some_and(|i| self.body[i as usize].label == tissue)).collect())
    }

    /// Phase `i` is sampled at `amplitudes[i]`.
    pub fn sample_ground_truth_4d(&self, n_phases: usize, amplitudes: &[f64], grid: &GridSpec) -> Result<Volume4D> {
        if n_phases == 0 || amplitudes.len() != n_phases {
            return domain(format!("{} phases requested but {} amplitudes given", n_phases, amplitudes.len()));
        }
        let phases = amplitudes.iter().map(|&a| self.sample_volume(a, grid)).collect::<Result<Vec<_>>>()?;
        Volume4D::new(phases)
    }

    pub fn find(&self, tissue: Tissue) -> impl Iterator<Item = &Ellipsoid> {
        self.body.iter().filter(move |e| e.label == tissue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec::centered([32, 32, 32], [5.0, 10.0, 10.0])
    }

    #[test]
    fn empty_phantom_is_air() {
        let p = Phantom4D { name: "empty".into(), body: vec![] };
        let v = p.sample_volume(0.3, &small_grid()).unwrap();
        assert!(v.data.iter().all(|&x| x == AIR_HU));
    }

    #[test]
    fn torso_center_is_water_at_rest() {
        let p = Phantom4D {
            name: "torso".into(),
            body: vec![Ellipsoid::new(Tissue::Torso, [0.0; 3], [100.0, 80.0, 60.0], 0.0)],
        };
        let g = GridSpec::centered([5, 5, 5], [10.0; 3]);
        let v = p.sample_volume(0.0, &g).unwrap();
        assert_eq!(v.get(2, 2, 2), 0.0);
    }

    #[test]
    fn amplitude_outside_unit_interval_is_rejected() {
        let p = Phantom4D::thorax_v1();
        assert!(p.sample_volume(1.01, &small_grid()).is_err());
        assert!(p.sample_volume(-0.1, &small_grid()).is_err());
    }

    fn transition_z(v: &Volume3D, j: usize, i: usize, inside: f32) -> f64 {
        // highest z whose voxel still carries `inside`, scanning downward from the top
        let nz = v.dims()[0];
        for k in (0..nz).rev() {
            if v.get(k, j, i) == inside {
                return v.grid.world(k, j, i)[2];
            }
        }
        f64::NAN
    }

    #[test]
    fn diaphragm_cap_drops_by_its_excursion() {
        let cap = Ellipsoid::new(Tissue::Diaphragm, [0.0, 0.0, -40.0], [60.0, 60.0, 40.0], 20.0)
            .with_motion([0.0, 0.0, -15.0], [0.0; 3]);
        let p = Phantom4D { name: "cap".into(), body: vec![cap] };
        // 1 mm z spacing, odd counts so a voxel column passes through x = y = 0
        let g = GridSpec::centered([121, 5, 5], [1.0, 10.0, 10.0]);
        let top0 = transition_z(&p.sample_volume(0.0, &g).unwrap(), 2, 2, 20.0);
        let top1 = transition_z(&p.sample_volume(1.0, &g).unwrap(), 2, 2, 20.0);
        // analytic superior surfaces: z = 0 and z = -15
        assert!((top0 - 0.0).abs() < 1e-9, "{top0}");
        assert!((top1 + 15.0).abs() < 1e-9, "{top1}");
    }

    #[test]
    fn ground_truth_phases() {
        let p = Phantom4D::thorax_v1();
        let g = small_grid();
        let one = p.sample_ground_truth_4d(1, &[0.0], &g).unwrap();
        assert_eq!(one.phases[0], p.sample_volume(0.0, &g).unwrap());
        assert!(p.sample_ground_truth_4d(3, &[0.0, 1.0], &g).is_err());

        let amps = crate::respiration::phase_amplitudes(10);
        let v = p.sample_ground_truth_4d(10, &amps, &g).unwrap();
        assert_ne!(v.phases[0], v.phases[5]);
        assert_eq!(v.phases[0], p.sample_volume(1.0, &g).unwrap());

        let flat = p.sample_ground_truth_4d(4, &[0.4; 4], &g).unwrap();
        assert!(flat.phases.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = Phantom4D::thorax_v1();
        let a = p.sample_volume(0.37, &small_grid()).unwrap();
        let b = p.sample_volume(0.37, &small_grid()).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn diaphragm_descends_monotonically() {
        let p = Phantom4D::thorax_v1();
        let g = GridSpec::centered([161, 3, 3], [1.0, 1.0, 1.0]);
        // column through the right lung center
        let g = GridSpec { origin: [g.origin[0], -1.0, -66.0], ..g };
        let mut last = f64::INFINITY;
        for step in 0..=4 {
            let amp = step as f64 * 0.25;
            let v = p.sample_volume(amp, &g).unwrap();
            let top = transition_z(&v, 1, 1, 20.0);
            assert!(top < last, "amplitude {amp}: {top} !< {last}");
            last = top;
        }
    }

    #[test]
    fn tumor_stays_inside_lung() {
        for variant in 0..6 {
            let p = Phantom4D::thorax_variant(variant);
            p.validate().unwrap();
            let g = GridSpec::centered([40, 40, 40], [4.0, 6.0, 6.0]);
            for step in 0..=4 {
                let amp = step as f64 * 0.25;
                let tumor = p.tissue_mask(Tissue::Tumor, amp, &g).unwrap();
                assert!(tumor.iter().any(|&t| t), "variant {variant}: tumor vanished");
                // the tumor sphere itself (not only its painted voxels) lies within a lung
                let t = p.find(Tissue::Tumor).next().unwrap();
                let c = t.center_at(amp);
                let r = t.semi_axes[0];
                let in_lung = |q: [f64; 3]| p.find(Tissue::Lung).any(|l| l.contains(q, amp));
                let probes = [[r, 0.0, 0.0], [-r, 0.0, 0.0], [0.0, r, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r], [0.0, 0.0, -r]];
                for d in probes {
                    assert!(in_lung([c[0] + d[0], c[1] + d[1], c[2] + d[2]]), "variant {variant} amp {amp}");
                }
                let diaphragm = p.find(Tissue::Diaphragm).next().unwrap();
                assert!(!diaphragm.contains([c[0], c[1], c[2] - r], amp));
            }
        }
    }

    #[test]
    fn hu_values_in_range() {
        let p = Phantom4D::thorax_v1();
        p.validate().unwrap();
        let v = p.sample_volume(0.5, &small_grid()).unwrap();
        assert!(v.data.iter().all(|&x| (-1000.0..=1500.0).contains(&x)));
    }
}
