use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rstar4d::metrics::{ncc, rmse_hu, ssim, RoiMask};
use rstar4d::recon::{fdk_mu, ReconOptions};
use rstar4d::rsa::{axis_flow_stats, streak_orientation, Trajectory, TrajectorySet};
use rstar4d::scanner::{scan_static, ProjectionSet, ScanGeometry, View};
use rstar4d::volume::{GridSpec, Volume3D};

fn small_geometry() -> ScanGeometry {
    ScanGeometry { detector_channels: [64, 24], views_per_turn: 36, ..ScanGeometry::desk() }
}

fn small_grid() -> GridSpec {
    GridSpec::centered([4, 24, 24], [10.0; 3])
}

fn random_projections(g: &ScanGeometry, seed: u64) -> ProjectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.detector_channels[0] * g.detector_channels[1];
    let views = (0..g.views_per_turn)
        .map(|k| View {
            angle: g.view_angle(k),
            time: g.view_time(k),
            phase: None,
            data: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        })
        .collect();
    ProjectionSet { geometry: *g, views }
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume3D::from_data(GridSpec::centered(dims, [1.0; 3]), (0..n).map(|_| rng.random_range(-1000.0..500.0)).collect()).unwrap()
}

fn ball(grid: GridSpec, r: f64) -> Volume3D {
    let [nz, ny, nx] = grid.dims;
    let mut v = Volume3D::zeros(grid);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.world(k, j, i);
                if p.iter().map(|c| c * c).sum::<f64>() < r * r {
                    v.data[(k * ny + j) * nx + i] = 0.02;
                }
            }
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fdk_is_linear(s1 in 0u64..1000, s2 in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let g = small_geometry();
        let (p1, p2) = (random_projections(&g, s1), random_projections(&g, s2 + 1000));
        let mut mix = p1.clone();
        for (m, (v1, v2)) in mix.views.iter_mut().zip(p1.views.iter().zip(&p2.views)) {
            m.data = v1.data.iter().zip(&v2.data).map(|(x, y)| a * x + b * y).collect();
        }
        let opts = ReconOptions::default();
        let grid = small_grid();
        let (f1, f2, fm) = (fdk_mu(&p1, &grid, &opts).unwrap(), fdk_mu(&p2, &grid, &opts).unwrap(), fdk_mu(&mix, &grid, &opts).unwrap());
        let expect: Vec<f32> = f1.data.iter().zip(&f2.data).map(|(x, y)| a * x + b * y).collect();
        let scale = expect.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        for (got, want) in fm.data.iter().zip(&expect) {
            prop_assert!((got - want).abs() <= 1e-5 * scale, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (random_volume([2, 12, 12], s1), random_volume([2, 12, 12], s2 + 1000));
        let (ab, ba) = (ssim(&a, &b, 7, 1500.0).unwrap().mean, ssim(&b, &a, 7, 1500.0).unwrap().mean);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn rmse_obeys_the_triangle_inequality(s in 0u64..1000) {
        let dims = [3, 8, 8];
        let (a, b, c) = (random_volume(dims, s), random_volume(dims, s + 1), random_volume(dims, s + 2));
        let roi = RoiMask::full(dims);
        let (ab, bc, ac) = (rmse_hu(&a, &b, &roi).unwrap(), rmse_hu(&b, &c, &roi).unwrap(), rmse_hu(&a, &c, &roi).unwrap());
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn ncc_ignores_positive_affine_rescaling(s in 0u64..1000, scale in 0.01f32..100.0, shift in -50.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = a.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let scaled: Vec<f32> = b.iter().map(|v| scale * v + shift).collect();
        let (r0, r1) = (ncc(&a, &b).unwrap(), ncc(&a, &scaled).unwrap());
        // the rescaled copy is rounded to f32 before correlating
        prop_assert!((r0 - r1).abs() <= 1e-5, "{r0} vs {r1}");
    }

    #[test]
    fn streak_profile_is_normalized(s in 0u64..1000) {
        let img = random_volume([1, 32, 32], s);
        let reference = random_volume([1, 32, 32], s + 7);
        let p = streak_orientation(&img.data, &reference.data, 32, 32).unwrap();
        prop_assert_eq!(p.energy.len(), 36);
        prop_assert!((p.energy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.energy.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn axis_stats_vanish_only_for_static_trajectories(s in 0u64..1000, moving in proptest::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n_phases = 4;
        let trajectories = (0..6)
            .map(|_| {
                let start = [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)];
                let mut positions = vec![start; n_phases + 1];
                if moving {
                    positions[2][rng.random_range(0..3)] += rng.random_range(0.5..2.0);
                }
                Trajectory { positions, truncated: false }
            })
            .collect();
        let set = TrajectorySet { n_phases, spacing: [2.5; 3], trajectories };
        let stats = axis_flow_stats(&set).unwrap();
        prop_assert!(stats.overall.iter().all(|&m| m >= 0.0));
        prop_assert_eq!(stats.overall.iter().any(|&m| m > 0.0), moving);
    }
}

#[test]
fn rotating_the_view_set_barely_changes_a_symmetric_object() {
    let g = small_geometry();
    let grid = GridSpec::centered([6, 32, 32], [8.0; 3]);
    let obj = ball(grid, 90.0);
    let step = 2.0 * std::f64::consts::PI / g.views_per_turn as f64;
    let turned = ScanGeometry { start_angle: g.start_angle + step, ..g };
    let opts = ReconOptions::default();
    let a = fdk_mu(&scan_static(&obj, &g).unwrap(), &grid, &opts).unwrap();
    let b = fdk_mu(&scan_static(&obj, &turned).unwrap(), &grid, &opts).unwrap();
    let rms = |v: &mut dyn Iterator<Item = f64>| {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
        (s / n as f64).sqrt()
    };
    let diff = rms(&mut a.data.iter().zip(&b.data).map(|(x, y)| (x - y) as f64));
    let level = rms(&mut a.data.iter().map(|&x| x as f64));
    assert!(diff < 0.01 * level, "rms change {diff:.3e} vs rms value {level:.3e}");
}
