//! Acceptance gate: runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rstar4d::dataset::{simulate_case, DatasetConfig, SimulatedCase, Split};
use rstar4d::metrics::{ncc, projection_domain_eval, roi_mean, water_region};
use rstar4d::net::train::{lung_ssim, stage1_samples, tetris_stage1, tetris_stage2, validation_ssim, Sample, Schedule, TrainingPair};
use rstar4d::net::*;
use rstar4d::phantom::Phantom4D;
use rstar4d::recon::{fdk_filtered, filter_views, gated_fdk_filtered, hu_convert, FilteredViews, ReconOptions};
use rstar4d::respiration::{amsterdam_shroud, phase_amplitudes, phase_sort, synth_breathing, BreathingSignal, PhaseMap, ShroudParams, SynthParams};
use rstar4d::rsa::{axis_flow_stats, circular_correlation, sampling_pattern, streak_orientation_volume, track_trajectories, FlowParams};
use rstar4d::scanner::{hu_to_mu, ray_integral, scan_static, simulate_4d_scan, ProjectionSet, ScanGeometry, ScanOptions, MU_WATER};
use rstar4d::volume::{GridSpec, Volume3D, Volume4D};

mod common;

type Outcome = Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn canonical_grid() -> GridSpec {
    GridSpec::centered([64, 128, 128], [2.5; 3])
}

fn jitter_free_signal() -> BreathingSignal {
    synth_breathing(&SynthParams::default()).unwrap()
}

struct StaticScan {
    truth: Volume3D,
    projections: ProjectionSet,
    filtered: FilteredViews,
    seconds: f64,
}

fn static_scan() -> &'static StaticScan {
    static CELL: OnceLock<StaticScan> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let truth = Phantom4D::thorax_v1().sample_volume(0.0, &canonical_grid()).unwrap();
        let projections = scan_static(&hu_to_mu(&truth, MU_WATER), &ScanGeometry::desk()).unwrap();
        let filtered = filter_views(&projections, &ReconOptions::default()).unwrap();
        StaticScan { truth, projections, filtered, seconds: t0.elapsed().as_secs_f64() }
    })
}

/// Gated images of the static phantom sorted by the jitter-free signal: pure
/// sampling artifacts, no motion.
fn static_gated() -> &'static (PhaseMap, Volume4D) {
    static CELL: OnceLock<(PhaseMap, Volume4D)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = static_scan();
        let map = phase_sort(&jitter_free_signal(), &ScanGeometry::desk().view_times(), 10).unwrap();
        let opts = ReconOptions::default();
        let phases = (0..10)
            .map(|i| hu_convert(&gated_fdk_filtered(&s.filtered, &map, i, &canonical_grid(), &opts).unwrap(), MU_WATER))
            .collect();
        (map, Volume4D::new(phases).unwrap())
    })
}

fn dynamic_scan() -> &'static ProjectionSet {
    static CELL: OnceLock<ProjectionSet> = OnceLock::new();
    CELL.get_or_init(|| {
        simulate_4d_scan(&Phantom4D::thorax_v1(), &jitter_free_signal(), &ScanGeometry::desk(), &canonical_grid(), &ScanOptions::default())
            .unwrap()
    })
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let (h, n, r, mu) = (0.5, 128usize, 25.0, 0.02f64);
    let grid = GridSpec::centered([n; 3], [h; 3]);
    let mut vol = Volume3D::zeros(grid);
    let sub = 4;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c = grid.world(k, j, i);
                let d = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let frac = if d < r - h {
                    1.0
                } else if d > r + h {
                    0.0
                } else {
                    let mut inside = 0;
                    for a in 0..sub * sub * sub {
                        let o = [a % sub, (a / sub) % sub, a / (sub * sub)].map(|q| (q as f64 + 0.5) / sub as f64 - 0.5);
                        let p = [c[0] + o[0] * h, c[1] + o[1] * h, c[2] + o[2] * h];
                        inside += (p.iter().map(|v| v * v).sum::<f64>() < r * r) as usize;
                    }
                    inside as f64 / (sub * sub * sub) as f64
                };
                let idx = vol.index(k, j, i);
                vol.data[idx] = (mu * frac) as f32;
            }
        }
    }
    let mut worst = 0.0f64;
    let mut rays = 0;
    for (d, theta) in [(0.0, 0.0), (5.0, 0.3), (10.0, 1.0), (15.0, 2.0), (20.0, 2.7), (12.5, 4.0)] {
        let (c, s) = (f64::cos(theta), f64::sin(theta));
        // in-plane direction (c, s, 0.2) normalised; offset d along a perpendicular
        let dir = {
            let v = [c, s, 0.2];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / l)
        };
        let perp = [-s, c, 0.0];
        let p0 = [0, 1, 2].map(|a| perp[a] * d - dir[a] * 100.0);
        let p1 = [0, 1, 2].map(|a| perp[a] * d + dir[a] * 100.0);
        let got = ray_integral(&vol, p0, p1);
        let want = 2.0 * mu * (r * r - d * d).sqrt();
        worst = worst.max((got - want).abs() / want);
        rays += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst < 0.01 && rays >= 5 && secs < 1.0, format!("{rays} rays, worst relative error {:.3}%, {secs:.2} s", 100.0 * worst))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let s = static_scan();
    let grid = canonical_grid();
    let ave = hu_convert(&fdk_filtered(&s.filtered, &grid, &ReconOptions::default()).unwrap(), MU_WATER);
    let secs = s.seconds + t0.elapsed().as_secs_f64();
    let mean = roi_mean(&ave, &water_region(&Phantom4D::thorax_v1(), &grid).unwrap()).unwrap();
    check(mean.abs() <= 30.0 && secs < 120.0, format!("water-region mean {mean:+.2} HU, scan + FDK {secs:.1} s"))
}

fn criterion_3() -> Outcome {
    // 5 s cycles put exactly 20 of the 240 views in each cycle, two per phase
    let signal = synth_breathing(&SynthParams { mean_period: 5.0, ..Default::default() }).unwrap();
    let grid = canonical_grid();
    let scan = &simulate_4d_scan(&Phantom4D::thorax_v1(), &signal, &ScanGeometry::desk(), &grid, &ScanOptions::default()).unwrap();
    let map = phase_sort(&signal, &scan.geometry.view_times(), 10).unwrap();
    let counts = map.counts();
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(format!("per-phase view counts are not equal: {counts:?}"));
    }
    let opts = ReconOptions::default();
    let filtered = filter_views(scan, &opts).unwrap();
    let ave = fdk_filtered(&filtered, &grid, &opts).unwrap();
    let mut mean = vec![0.0f64; grid.len()];
    for i in 0..10 {
        let g = gated_fdk_filtered(&filtered, &map, i, &grid, &opts).unwrap();
        mean.iter_mut().zip(&g.data).for_each(|(m, v)| *m += *v as f64 / 10.0);
    }
    let peak = ave.data.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let diff = mean.iter().zip(&ave.data).fold(0.0f64, |m, (a, b)| m.max((a - *b as f64).abs()));
    check(diff < 1e-5 * peak, format!("max |mean(f_i) - f_ave| = {:.2e} x max|f_ave| ({counts:?} views)", diff / peak))
}

fn criterion_4() -> Outcome {
    let worst = common::separable_vs_isotropic_worst();
    check(worst < 1e-6, format!("24 random tensors, worst relative difference {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    for c in [1, 2, 8, 16, 64] {
        let sep = layers::SepConv4DBlock::<f32>::zeros("s", c, c);
        let iso = Iso4DConvBlock::<f32>::zeros("i", c, c);
        let xy = sep.w_xy.len();
        ok &= 3 * sep.weight_count() == 5 * xy && iso.weight_count() == 9 * xy;
    }
    let sep = layers::SepConv4DBlock::<f32>::zeros("s", 16, 16);
    let iso = Iso4DConvBlock::<f32>::zeros("i", 16, 16);
    let xy = sep.w_xy.len() as f64;
    check(ok, format!("separable/2D = {:.6}, isotropic/2D = {:.6}", sep.weight_count() as f64 / xy, iso.weight_count() as f64 / xy))
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let errors = common::layer_gradient_errors();
    let (name, worst) = errors.iter().cloned().fold((String::new(), 0.0), |a, e| if e.1 > a.1 { e } else { a });
    let secs = t0.elapsed().as_secs_f64();
    check(worst < common::TOL && secs < 300.0, format!("{} checks, worst {worst:.2e} ({name}), {secs:.1} s", errors.len()))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut net = Network::<f32>::build(NetConfig::default(), 4).unwrap();
    net.head_w.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let x: Tensor5D<f32> = common::rand_tensor(&mut rng, [2, 10, 4, 16, 16]).cast();
    let y = net.forward(&x).unwrap();
    let worst = [1, 3, 7].iter().map(|&k| net.forward(&x.roll_t(k)).unwrap().max_abs_diff(&y.roll_t(k))).fold(0.0f64, |a, b| a.max(b as f64));
    check(worst < 1e-5, format!("shifts 1, 3, 7: max deviation {worst:.2e}"))
}

/// Reduced desk dataset: 32 x 64 x 64 voxels of 5 mm, 128 x 96 detector channels.
fn desk_dataset() -> &'static Vec<SimulatedCase> {
    static CELL: OnceLock<Vec<SimulatedCase>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = DatasetConfig {
            dims: [32, 64, 64],
            spacing: [5.0; 3],
            geometry: ScanGeometry { detector_channels: [128, 96], ..ScanGeometry::desk() },
            ..Default::default()
        };
        cfg.cases().iter().map(|c| simulate_case(&cfg, c).unwrap()).collect()
    })
}

fn split_pairs(split: Split) -> Vec<&'static SimulatedCase> {
    desk_dataset().iter().filter(|c| c.spec.split == split).collect()
}

struct Trained {
    tetris: Network<f32>,
    stage2_only: Network<f32>,
    seconds: f64,
}

const STAGE1_EPOCHS: usize = 3;
const STAGE2_EPOCHS: usize = 3;
const STAGE2_STEPS: usize = 100;

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let train: Vec<Sample> = split_pairs(Split::Train).iter().map(|c| Sample::from_pair(&c.pair, true).unwrap()).collect();
        let cfg = NetConfig { in_channels: 2, channels: vec![8, 16, 32], residual: true };
        let hyper = AdamHyper { lr_start: 1e-3, lr_end: 1e-4, ..Default::default() };
        let shapes = [[8, 32, 32], [16, 24, 24], [32, 16, 16]];
        let mut nets = Vec::new();
        for tetris in [true, false] {
            let mut net = Network::<f32>::build(cfg.clone(), 3).unwrap();
            let mut st = OptimState::new(&net);
            if tetris {
                let s1 = stage1_samples(&train).unwrap();
                tetris_stage1(&mut net, &s1, &Schedule::new(STAGE1_EPOCHS, 1), &mut st, &hyper, |_, _, _| Ok(())).unwrap();
                st = OptimState::new(&net);
            }
            tetris_stage2(&mut net, &train, &shapes, STAGE2_STEPS, &Schedule::new(STAGE2_EPOCHS, 2), &mut st, &hyper, |_, _, _| Ok(()))
                .unwrap();
            nets.push(net);
        }
        let stage2_only = nets.pop().unwrap();
        let tetris = nets.pop().unwrap();
        Trained { tetris, stage2_only, seconds: t0.elapsed().as_secs_f64() }
    })
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let n_train = split_pairs(Split::Train).len();
    let val: Vec<TrainingPair> = split_pairs(Split::Validation).iter().map(|c| c.pair.clone()).collect();
    let sim = t0.elapsed().as_secs_f64();
    let t = trained();
    let tetris = validation_ssim(&t.tetris, &val, None).unwrap();
    let stage2 = validation_ssim(&t.stage2_only, &val, None).unwrap();
    let input = val.iter().map(|p| lung_ssim(&p.degraded, &p.target).unwrap()).sum::<f64>() / val.len() as f64;
    let hours = (sim + t.seconds) / 3600.0;
    check(
        tetris >= stage2 && stage2 >= input && tetris - input >= 0.15 && hours < 4.0 && n_train >= 8 && val.len() >= 2,
        format!(
            "lung SSIM Tetris {tetris:.4} >= stage II only {stage2:.4} >= gated input {input:.4}; gain {:+.4}; {n_train} train / {} val; {:.2} h",
            tetris - input,
            val.len(),
            hours
        ),
    )
}

fn criterion_9() -> Outcome {
    let (map, phases) = static_gated();
    let s = static_scan();
    let cov = sampling_pattern(map, &s.projections.angles()).unwrap();
    let m = cov[0].harmonic;
    let mut gap = Vec::new();
    let mut streak = Vec::new();
    for (c, img) in cov.iter().zip(&phases.phases) {
        let prof = streak_orientation_volume(img, &s.truth, 16..48).unwrap();
        match (c.gap_phase, prof.harmonic_phase(m)) {
            (Some(g), Some(p)) => {
                gap.push(g);
                streak.push(p);
            }
            _ => return Err(format!("phase {} has no gap or streak orientation", c.phase)),
        }
    }
    let r = circular_correlation(&gap, &streak).unwrap();
    check(r > 0.8 && gap.len() == 10, format!("circular correlation {r:.4} over {} phases (harmonic {m})", gap.len()))
}

fn criterion_10() -> Outcome {
    let params = FlowParams::default();
    let gt = Phantom4D::thorax_v1().sample_ground_truth_4d(10, &phase_amplitudes(10), &canonical_grid()).unwrap();
    let resp = axis_flow_stats(&track_trajectories(&gt, 8, &params).unwrap()).unwrap();
    let art = axis_flow_stats(&track_trajectories(&static_gated().1, 8, &params).unwrap()).unwrap();
    let (rz, rxy) = (resp.overall[2], resp.in_plane());
    let (az, axy) = (art.overall[2], art.in_plane());
    check(
        rz >= 2.0 * rxy && axy >= 2.0 * az,
        format!("respiration-only |dz| {rz:.3} vs in-plane {rxy:.3} mm; artifact-only in-plane {axy:.3} vs |dz| {az:.3} mm"),
    )
}

fn criterion_11() -> Outcome {
    let scan = dynamic_scan();
    let sig = jitter_free_signal();
    let est = amsterdam_shroud(scan, &ShroudParams::default()).unwrap();
    let truth: Vec<f32> = scan.geometry.view_times().iter().map(|&t| sig.amplitude_at(t) as f32).collect();
    let got: Vec<f32> = est.signal.amplitudes.iter().map(|&a| a as f32).collect();
    let r = ncc(&got, &truth).unwrap();
    check(r > 0.9, format!("Pearson correlation {r:.4} over {} views", truth.len()))
}

fn criterion_12() -> Outcome {
    let t = trained();
    let mut truth_worst = 0.0f64;
    let (mut better, mut total) = (0, 0);
    for c in split_pairs(Split::Test) {
        let truth = projection_domain_eval(&c.pair.target, &c.projections, MU_WATER).unwrap();
        truth_worst = truth.iter().fold(truth_worst, |m, v| m.max((v.ncc - 1.0).abs()));
        let restored = forward_full(&t.tetris, &c.pair.degraded, &c.pair.average, None).unwrap();
        let net = projection_domain_eval(&restored, &c.projections, MU_WATER).unwrap();
        let input = projection_domain_eval(&c.pair.degraded, &c.projections, MU_WATER).unwrap();
        better += net.iter().zip(&input).filter(|(a, b)| a.ncc > b.ncc).count();
        total += net.len();
    }
    let frac = better as f64 / total as f64;
    check(
        truth_worst <= 1e-6 && frac >= 0.9,
        format!("ground truth |NCC - 1| <= {truth_worst:.1e}; network beats gated input on {better}/{total} views ({:.1}%)", 100.0 * frac),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rstar4d")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs every command into `root` and returns each output directory's SHA256SUMS.
fn cli_pipeline(root: &Path) -> Result<Vec<(String, String)>, String> {
    let cfg_path = root.join("run.toml");
    run_cli(&["init-config", "--out", cfg_path.to_str().unwrap()])?;
    std::fs::write(&cfg_path, common::tiny_config(Path::new("out")).to_toml()).map_err(|e| e.to_string())?;
    let c = cfg_path.to_str().unwrap();
    let out = root.join("out");
    let p = |s: &str| out.join(s).to_str().unwrap().to_string();
    run_cli(&["simulate", "--config", c])?;
    run_cli(&["reconstruct", "--config", c, "--projections", &p("simulate/projections.rsp")])?;
    run_cli(&["analyze-rsa", "--config", c, "--recon", &p("reconstruct"), "--projections", &p("simulate/projections.rsp")])?;
    run_cli(&["dataset", "--config", c])?;
    run_cli(&["train", "--config", c, "--manifest", &p("dataset/manifest.csv")])?;
    run_cli(&["infer", "--config", c, "--checkpoint", &p("train/model.rsc"), "--recon", &p("reconstruct")])?;
    run_cli(&[
        "evaluate",
        "--config",
        c,
        "--recovered",
        &p("infer"),
        "--truth",
        &p("simulate/truth"),
        "--projections",
        &p("simulate/projections.rsp"),
    ])?;
    let mut sums = vec![("init-config".to_string(), std::fs::read_to_string(root.join("run.toml")).map_err(|e| e.to_string())?)];
    for cmd in ["simulate", "reconstruct", "rsa", "dataset", "train", "infer", "evaluate"] {
        sums.push((cmd.to_string(), std::fs::read_to_string(out.join(cmd).join("SHA256SUMS")).map_err(|e| e.to_string())?));
    }
    Ok(sums)
}

fn criterion_13() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cli_pipeline(a.path())?;
    let rb = cli_pipeline(b.path())?;
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let files: usize = ra.iter().skip(1).map(|(_, s)| s.lines().count()).sum();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands, {files} output files byte-identical across two runs", ra.len())
        } else {
            format!("outputs differ for {differing:?}")
        },
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 13] = [
        (1, "projector sphere chords", criterion_1),
        (2, "FDK water accuracy", criterion_2),
        (3, "average equals mean of gated images", criterion_3),
        (4, "separable equals composed isotropic", criterion_4),
        (5, "weight-count ratios", criterion_5),
        (6, "finite-difference gradients", criterion_6),
        (7, "temporal circularity", criterion_7),
        (8, "Tetris ordering", criterion_8),
        (9, "streak rotation follows sampling gaps", criterion_9),
        (10, "motion axis dominance", criterion_10),
        (11, "Amsterdam Shroud signal", criterion_11),
        (12, "projection-domain NCC", criterion_12),
        (13, "CLI reproducibility", criterion_13),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| s == &n.to_string()) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
