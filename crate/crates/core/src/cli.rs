//! Command-line front end. Every command reads one TOML run configuration, writes
//! into its own output directory and finishes with a `SHA256SUMS` listing.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stream};
use crate::dataset::{load_split, simulate_case, write_case, write_manifest, Split, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{
    body_mask, image_scores, lung_mask, projection_domain_eval, tumor_mask_from_phantom, write_csv, RoiMask,
};
use crate::net::checkpoint::{load_checkpoint, save_checkpoint};
use crate::net::network::{forward_full, Network};
use crate::net::optim::OptimState;
use crate::net::train::{
    stage1_samples, tetris_stage1, tetris_stage2, validation_ssim, EpochLog, Sample, Schedule, Stage, TrainingPair,
};
use crate::recon::{phase_map_from_labels, reconstruct_all};
use crate::respiration::{phase_amplitudes, synth_breathing};
use crate::rsa::{
    axis_flow_stats, export_trajectory_features, fisher_lee_correlation, sampling_pattern, streak_orientation_volume,
    track_trajectories, write_pgm16, OrientationProfile,
};
use crate::scanner::{simulate_4d_scan, ProjectionSet};
use crate::volume::{Volume3D, Volume4D};

pub const SUMS_FILE: &str = "SHA256SUMS";
const PHASE: &str = "phase";

#[derive(Debug, Parser)]
#[command(name = "rstar4d", version, about = "Desk-scale 4D cone-beam CT simulation, reconstruction, streak analysis and restoration")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default configuration.
    InitConfig {
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Simulate a respiration-gated scan: projections.rsp, truth/phase*.rsv, signal.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <output_dir>/simulate).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gated FDK: average.rsv and phase*.rsv.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// RSP1 projection file with phase labels.
        #[arg(long)]
        projections: PathBuf,
        /// Output directory (default: <output_dir>/reconstruct).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sampling gaps, streak orientation, motion trajectories and slice images.
    AnalyzeRsa {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding average.rsv and phase*.rsv.
        #[arg(long)]
        recon: PathBuf,
        /// The projections the reconstruction came from.
        #[arg(long)]
        projections: PathBuf,
        /// Output directory (default: <output_dir>/rsa).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the training, validation and test cases and write their manifest.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <output_dir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-stage training: per-epoch checkpoints, train_log.csv and model.rsc.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest.csv.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (default: <output_dir>/train).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue after this per-epoch checkpoint (stage<S>-epoch<NNN>.rsc).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore a gated reconstruction with a trained model.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding average.rsv and phase*.rsv.
        #[arg(long)]
        recon: PathBuf,
        /// Output directory (default: <output_dir>/infer).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image metrics against ground truth and/or per-view projection metrics.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory of phase*.rsv to score.
        #[arg(long)]
        recovered: PathBuf,
        /// Ground-truth phase*.rsv directory.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Reference RSP1 projections with phase labels.
        #[arg(long)]
        projections: Option<PathBuf>,
        /// Output directory (default: <output_dir>/evaluate).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit code of an error class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Domain(_) | Error::Degenerate(_) => 4,
        Error::Integrity(_) => 5,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let (dir, result) = match cli.command {
        Command::InitConfig { out, force } => return init_config(&out, force),
        Command::Simulate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "simulate")?;
            (dir.clone(), simulate(&cfg, &dir))
        }
        Command::Reconstruct { config, projections, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "reconstruct")?;
            (dir.clone(), reconstruct(&cfg, &projections, &dir))
        }
        Command::AnalyzeRsa { config, recon, projections, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "rsa")?;
            (dir.clone(), analyze_rsa(&cfg, &recon, &projections, &dir))
        }
        Command::Dataset { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "dataset")?;
            (dir.clone(), dataset(&cfg, &dir))
        }
        Command::Train { config, manifest, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "train")?;
            (dir.clone(), train(&cfg, &manifest, &dir, resume.as_deref()))
        }
        Command::Infer { config, checkpoint, recon, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "infer")?;
            (dir.clone(), infer(&cfg, &checkpoint, &recon, &dir))
        }
        Command::Evaluate { config, recovered, truth, projections, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&cfg, out, "evaluate")?;
            (dir.clone(), evaluate(&cfg, &recovered, truth.as_deref(), projections.as_deref(), &dir))
        }
    };
    result?;
    write_checksums(&dir)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.join(name));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn init_config(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", out.display())));
    }
    fs::write(out, RunConfig::default().to_toml())?;
    Ok(())
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(root, &path, out)?;
        } else if path.strip_prefix(root).map(|p| p != Path::new(SUMS_FILE)).unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `SHA256SUMS` (sha256sum format) for every file below `dir`.
pub fn write_checksums(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    files_under(dir, dir, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"), p))
        .collect();
    rel.sort();
    let mut text = String::new();
    for (name, path) in rel {
        let digest = Sha256::digest(fs::read(&path)?);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        text.push_str(&format!("{hex}  {name}\n"));
    }
    fs::write(dir.join(SUMS_FILE), text)?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let grid = cfg.grid();
    let phantom = cfg.phantom();
    let signal = synth_breathing(&cfg.synth_params())?;
    let n = cfg.scan.n_phases;
    let scan = simulate_4d_scan(&phantom, &signal, &cfg.geometry, &grid, &cfg.scan_options())?;
    scan.write_rsp(&dir.join("projections.rsp"))?;
    phantom.sample_ground_truth_4d(n, &phase_amplitudes(n), &grid)?.write_dir(&dir.join("truth"), PHASE)?;
    signal.write_csv(&dir.join("signal.csv"))
}

pub fn reconstruct(cfg: &RunConfig, projections: &Path, dir: &Path) -> Result<()> {
    let scan = ProjectionSet::read_rsp(projections)?;
    let map = phase_map_from_labels(&scan, cfg.scan.n_phases)?;
    let (average, phases) = reconstruct_all(&scan, &map, &cfg.grid(), &cfg.recon)?;
    average.write_rsv(&dir.join("average.rsv"))?;
    phases.write_dir(dir, PHASE)
}

fn read_recon(dir: &Path) -> Result<(Volume3D, Volume4D)> {
    let average = Volume3D::read_rsv(&dir.join("average.rsv"))?;
    let phases = Volume4D::read_dir(dir, PHASE)?;
    if average.grid != phases.grid() {
        return Err(Error::Integrity(format!("{}: average and phase grids differ", dir.display())));
    }
    Ok((average, phases))
}

#[derive(Serialize)]
struct SamplingRow {
    phase: usize,
    views: usize,
    clusters: usize,
    gaps: usize,
    dominant_gap_deg: Option<f64>,
    gap_phase_deg: Option<f64>,
}

#[derive(Serialize)]
struct StreakRow {
    phase: usize,
    argmax_deg: f64,
    harmonic_phase_deg: Option<f64>,
    degenerate: bool,
}

#[derive(Serialize)]
struct EnergyRow {
    phase: usize,
    orientation_deg: f64,
    energy: f64,
}

#[derive(Serialize)]
struct RsaSummary {
    harmonic: usize,
    gap_streak_correlation: Option<f64>,
    mean_abs_dx_mm: f64,
    mean_abs_dy_mm: f64,
    mean_abs_dz_mm: f64,
    trajectories: usize,
}

#[derive(Serialize)]
struct FlowRow {
    transition: usize,
    mean_abs_dx_mm: f64,
    mean_abs_dy_mm: f64,
    mean_abs_dz_mm: f64,
}

/// Streak orientation is measured on `phase - average`.
pub fn analyze_rsa(cfg: &RunConfig, recon: &Path, projections: &Path, dir: &Path) -> Result<()> {
    let (average, phases) = read_recon(recon)?;
    let scan = ProjectionSet::read_rsp(projections)?;
    let n = phases.n_phases();
    let map = phase_map_from_labels(&scan, n)?;
    let cov = sampling_pattern(&map, &scan.angles())?;
    let [nz, ny, nx] = average.dims();
    let [z0, z1] = cfg.rsa.streak_slices;
    let z_range = z0.min(nz.saturating_sub(1))..z1.min(nz);
    let profiles = phases
        .phases
        .iter()
        .map(|p| streak_orientation_volume(p, &average, z_range.clone()))
        .collect::<Result<Vec<OrientationProfile>>>()?;
    let harmonic = cov[0].harmonic;

    let sampling: Vec<SamplingRow> = cov
        .iter()
        .map(|c| SamplingRow {
            phase: c.phase,
            views: c.angles.len(),
            clusters: c.clusters.len(),
            gaps: c.gaps.len(),
            dominant_gap_deg: c.dominant_gap.map(f64::to_degrees),
            gap_phase_deg: c.gap_phase.map(f64::to_degrees),
        })
        .collect();
    write_csv(&dir.join("sampling.csv"), &sampling)?;
    let streaks: Vec<StreakRow> = profiles
        .iter()
        .enumerate()
        .map(|(p, o)| StreakRow {
            phase: p,
            argmax_deg: o.argmax.to_degrees(),
            harmonic_phase_deg: o.harmonic_phase(harmonic).map(f64::to_degrees),
            degenerate: o.degenerate,
        })
        .collect();
    write_csv(&dir.join("streaks.csv"), &streaks)?;
    let orientations = OrientationProfile::orientations();
    let energy: Vec<EnergyRow> = profiles
        .iter()
        .enumerate()
        .flat_map(|(p, o)| {
            o.energy.iter().zip(&orientations).map(move |(&e, &a)| EnergyRow { phase: p, orientation_deg: a.to_degrees(), energy: e })
        })
        .collect();
    write_csv(&dir.join("orientation_energy.csv"), &energy)?;

    let gap: Option<Vec<f64>> = cov.iter().map(|c| c.gap_phase).collect();
    let streak: Option<Vec<f64>> = profiles.iter().map(|o| o.harmonic_phase(harmonic)).collect();
    let correlation = match (gap, streak) {
        (Some(g), Some(s)) if n >= 2 => Some(fisher_lee_correlation(&g, &s)?),
        _ => None,
    };

    let set = track_trajectories(&phases, cfg.rsa.trajectory_stride, &cfg.rsa.flow)?;
    export_trajectory_features(&set, &dir.join("trajectories.csv"))?;
    let stats = axis_flow_stats(&set)?;
    let flow: Vec<FlowRow> = stats
        .per_transition
        .iter()
        .enumerate()
        .map(|(i, d)| FlowRow { transition: i, mean_abs_dx_mm: d[0], mean_abs_dy_mm: d[1], mean_abs_dz_mm: d[2] })
        .collect();
    write_csv(&dir.join("flow.csv"), &flow)?;
    write_csv(
        &dir.join("summary.csv"),
        &[RsaSummary {
            harmonic,
            gap_streak_correlation: correlation,
            mean_abs_dx_mm: stats.overall[0],
            mean_abs_dy_mm: stats.overall[1],
            mean_abs_dz_mm: stats.overall[2],
            trajectories: set.trajectories.len(),
        }],
    )?;

    let [lo, hi] = cfg.rsa.pgm_window;
    let mid = nz / 2;
    write_pgm16(&dir.join("average_axial.pgm"), average.slice_z(mid), ny, nx, lo, hi)?;
    for (p, v) in phases.phases.iter().enumerate() {
        write_pgm16(&dir.join(format!("phase{p}_axial.pgm")), v.slice_z(mid), ny, nx, lo, hi)?;
    }
    Ok(())
}

pub fn dataset(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for spec in cfg.dataset.cases() {
        let case = simulate_case(&cfg.dataset, &spec)?;
        rows.push(write_case(dir, spec.split, &spec.name, &case.pair)?);
        eprintln!("dataset: {}", spec.name);
    }
    write_manifest(&dir.join(MANIFEST), &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResumePoint {
    stage: Stage,
    /// Last completed epoch.
    epoch: usize,
}

fn checkpoint_name(stage: Stage, epoch: usize) -> String {
    let s = if stage == Stage::One { 1 } else { 2 };
    format!("stage{s}-epoch{epoch:03}.rsc")
}

fn parse_checkpoint_name(path: &Path) -> Result<ResumePoint> {
    let bad = || Error::Config(format!("{} is not a stage<S>-epoch<NNN>.rsc checkpoint", path.display()));
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
    let rest = name.strip_prefix("stage").and_then(|r| r.strip_suffix(".rsc")).ok_or_else(bad)?;
    let (s, e) = rest.split_once("-epoch").ok_or_else(bad)?;
    let stage = match s {
        "1" => Stage::One,
        "2" => Stage::Two,
        _ => return Err(bad()),
    };
    Ok(ResumePoint { stage, epoch: e.parse().map_err(|_| bad())? })
}

const TRAIN_LOG: &str = "train_log.csv";

fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(crate::metrics::csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<EpochLog>, _>>().map_err(crate::metrics::csv_err)
}

pub fn train(cfg: &RunConfig, manifest: &Path, dir: &Path, resume: Option<&Path>) -> Result<()> {
    let residual = cfg.network.residual;
    let train_cases: Vec<TrainingPair> = load_split(manifest, Split::Train)?.into_iter().map(|(_, p)| p).collect();
    let val_cases: Vec<TrainingPair> = load_split(manifest, Split::Validation)?.into_iter().map(|(_, p)| p).collect();
    if train_cases.is_empty() {
        return Err(Error::Domain(format!("{} lists no training cases", manifest.display())));
    }
    let samples = train_cases.iter().map(|p| Sample::from_pair(p, residual)).collect::<Result<Vec<_>>>()?;
    let tc = &cfg.training;
    let hyper = tc.adam;
    let tile = cfg.tile();

    let (mut net, mut state, point) = match resume {
        Some(path) => {
            let point = parse_checkpoint_name(path)?;
            let (net, state) = load_checkpoint(path)?;
            if net.config != cfg.net_config() {
                return Err(Error::Integrity(format!("{} was trained with a different network configuration", path.display())));
            }
            let state = state.ok_or_else(|| Error::Integrity(format!("{} has no optimizer state", path.display())))?;
            (net, state, Some(point))
        }
        None => {
            let net = Network::<f32>::build(cfg.net_config(), cfg.stream_seed(Stream::NetworkInit))?;
            let state = OptimState::new(&net);
            (net, state, None)
        }
    };
    let mut logs: Vec<EpochLog> = match point {
        Some(p) => read_log(&dir.join(TRAIN_LOG))?
            .into_iter()
            .filter(|l| (l.stage, l.epoch) <= (p.stage, p.epoch))
            .collect(),
        None => Vec::new(),
    };

    let mut on_epoch = |log: &mut EpochLog, net: &Network<f32>, state: &OptimState| -> Result<()> {
        if !val_cases.is_empty() {
            log.val_ssim = Some(validation_ssim(net, &val_cases, tile)?);
        }
        save_checkpoint(net, Some(state), &dir.join(checkpoint_name(log.stage, log.epoch)))?;
        logs.push(log.clone());
        write_csv(&dir.join(TRAIN_LOG), &logs)?;
        eprintln!("train: stage {:?} epoch {} loss {:.5} val_ssim {:?}", log.stage, log.epoch, log.loss, log.val_ssim);
        Ok(())
    };

    let stage1 = Schedule {
        epochs: tc.stage1_epochs,
        start_epoch: match point {
            None => 0,
            Some(p) if p.stage == Stage::One => p.epoch + 1,
            Some(_) => tc.stage1_epochs,
        },
        seed: tc.seed,
    };
    if stage1.start_epoch < stage1.epochs {
        let slices = stage1_samples(&samples)?;
        tetris_stage1(&mut net, &slices, &stage1, &mut state, &hyper, &mut on_epoch)?;
    }
    let stage2 = Schedule {
        epochs: tc.stage2_epochs,
        start_epoch: match point {
            Some(p) if p.stage == Stage::Two => p.epoch + 1,
            _ => 0,
        },
        seed: tc.seed.wrapping_add(1),
    };
    if stage2.start_epoch == 0 {
        state = OptimState::new(&net);
    }
    if stage2.start_epoch < stage2.epochs {
        tetris_stage2(&mut net, &samples, &tc.block_shapes, tc.stage2_steps, &stage2, &mut state, &hyper, &mut on_epoch)?;
    }
    net.set_z_frozen(false);
    save_checkpoint(&net, None, &dir.join("model.rsc"))
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, recon: &Path, dir: &Path) -> Result<()> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let (average, phases) = read_recon(recon)?;
    forward_full(&net, &phases, &average, cfg.tile())?.write_dir(dir, PHASE)
}

/// Tumor from the phantom at each phase's amplitude; lung and body from the truth phase.
fn phase_rois(cfg: &RunConfig, truth: &Volume4D) -> Result<Vec<Vec<RoiMask>>> {
    let phantom = cfg.phantom();
    let grid = truth.grid();
    let amps = phase_amplitudes(truth.n_phases());
    truth
        .phases
        .iter()
        .zip(amps)
        .map(|(t, a)| {
            let (lung, warning) = lung_mask(t);
            if let Some(w) = warning {
                return Err(Error::Degenerate(w));
            }
            Ok(vec![tumor_mask_from_phantom(&phantom, a, &grid)?, lung, body_mask(t)])
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, recovered: &Path, truth: Option<&Path>, projections: Option<&Path>, dir: &Path) -> Result<()> {
    if truth.is_none() && projections.is_none() {
        return Err(Error::Config("evaluate needs --truth, --projections or both".into()));
    }
    let rec = Volume4D::read_dir(recovered, PHASE)?;
    if let Some(t) = truth {
        let truth = Volume4D::read_dir(t, PHASE)?;
        let rois = phase_rois(cfg, &truth)?;
        let e = &cfg.evaluation;
        write_csv(&dir.join("image_metrics.csv"), &image_scores(&rec, &truth, &rois, e.ssim_window, e.ssim_range_hu)?)?;
    }
    if let Some(p) = projections {
        let scan = ProjectionSet::read_rsp(p)?;
        write_csv(&dir.join("projection_metrics.csv"), &projection_domain_eval(&rec, &scan, cfg.recon.mu_water)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names_round_trip() {
        for (stage, epoch) in [(Stage::One, 0), (Stage::Two, 17)] {
            let name = checkpoint_name(stage, epoch);
            assert_eq!(parse_checkpoint_name(Path::new(&name)).unwrap(), ResumePoint { stage, epoch });
        }
        assert!(parse_checkpoint_name(Path::new("model.rsc")).is_err());
        assert!(parse_checkpoint_name(Path::new("stage3-epoch001.rsc")).is_err());
    }
}
