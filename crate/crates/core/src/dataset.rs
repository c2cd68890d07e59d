//! Simulated training, validation and test cases: each is a phantom variant
//! scanned under one breathing signal, reconstructed with gated FDK, and paired
//! with its ground-truth 4D image.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::csv_err;
use crate::net::train::TrainingPair;
use crate::phantom::Phantom4D;
use crate::recon::{reconstruct_all, phase_map_from_labels, ReconOptions};
use crate::respiration::{phase_amplitudes, synth_breathing, SynthParams};
use crate::scanner::{simulate_4d_scan, ProjectionSet, ScanGeometry, ScanOptions};
use crate::volume::{GridSpec, Volume3D, Volume4D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Grid extents (z, y, x).
    pub dims: [usize; 3],
    /// Voxel size (z, y, x), mm.
    pub spacing: [f64; 3],
    pub geometry: ScanGeometry,
    pub n_phases: usize,
    pub train_variants: usize,
    pub signals_per_variant: usize,
    pub validation: usize,
    pub test: usize,
    /// Mean breathing periods are drawn uniformly from this range, seconds.
    pub period_range: [f64; 2],
    pub period_jitter: f64,
    pub amplitude_jitter: f64,
    pub noise_sd: f64,
    /// Derived from the run seed, not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dims: [64, 128, 128],
            spacing: [2.5; 3],
            geometry: ScanGeometry::desk(),
            n_phases: 10,
            train_variants: 8,
            signals_per_variant: 2,
            validation: 2,
            test: 2,
            period_range: [3.5, 5.0],
            period_jitter: 0.1,
            amplitude_jitter: 0.1,
            noise_sd: 0.0,
            seed: 1,
        }
    }
}

/// What to simulate for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub name: String,
    pub split: Split,
    pub variant: u64,
    pub signal: SynthParams,
}

impl DatasetConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::centered(self.dims, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        self.geometry.validate()?;
        if self.n_phases < 2 {
            return domain("a 4D dataset needs at least two phases");
        }
        if self.train_variants == 0 || self.signals_per_variant == 0 {
            return domain("the training split needs at least one variant and one signal");
        }
        let [lo, hi] = self.period_range;
        if !(lo > 0.0 && hi >= lo) {
            return domain("period range must be positive and ordered");
        }
        Ok(())
    }

    /// Training variants are 1..=train_variants; validation and test use disjoint
    /// variant numbers so no anatomy is shared across splits.
    pub fn cases(&self) -> Vec<CaseSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let duration = self.geometry.rotation_time;
        let signal = |rng: &mut ChaCha8Rng| SynthParams {
            duration,
            mean_period: rng.random_range(self.period_range[0]..=self.period_range[1]),
            period_jitter: self.period_jitter,
            amplitude_jitter: self.amplitude_jitter,
            sample_rate: 25.0,
            seed: rng.random(),
        };
        let mut out = Vec::new();
        for v in 1..=self.train_variants as u64 {
            for s in 0..self.signals_per_variant {
                out.push(CaseSpec { name: format!("train-v{v:02}-s{s}"), split: Split::Train, variant: v, signal: signal(&mut rng) });
            }
        }
        for (split, count, base) in [(Split::Validation, self.validation, 1000), (Split::Test, self.test, 2000)] {
            for i in 0..count as u64 {
                out.push(CaseSpec { name: format!("{}-v{i:02}", split.name()), split, variant: base + i, signal: signal(&mut rng) });
            }
        }
        out
    }
}

/// One simulated case with its projections.
#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub spec: CaseSpec,
    pub pair: TrainingPair,
    pub projections: ProjectionSet,
}

pub fn simulate_case(cfg: &DatasetConfig, spec: &CaseSpec) -> Result<SimulatedCase> {
    let grid = cfg.grid();
    let phantom = Phantom4D::thorax_variant(spec.variant);
    let signal = synth_breathing(&spec.signal)?;
    let scan_opts = ScanOptions { n_phases: cfg.n_phases, noise_sd: cfg.noise_sd, seed: spec.signal.seed, ..Default::default() };
    let projections = simulate_4d_scan(&phantom, &signal, &cfg.geometry, &grid, &scan_opts)?;
    let map = phase_map_from_labels(&projections, cfg.n_phases)?;
    let (average, degraded) = reconstruct_all(&projections, &map, &grid, &ReconOptions::default())?;
    let target = phantom.sample_ground_truth_4d(cfg.n_phases, &phase_amplitudes(cfg.n_phases), &grid)?;
    Ok(SimulatedCase { spec: spec.clone(), pair: TrainingPair { degraded, average, target }, projections })
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub split: Split,
    pub name: String,
    pub degraded: String,
    pub average: String,
    pub target: String,
}

pub const MANIFEST: &str = "manifest.csv";
const PHASE_PREFIX: &str = "phase";

/// Writes a case under `root/name/` and returns its manifest row.
pub fn write_case(root: &Path, split: Split, name: &str, pair: &TrainingPair) -> Result<ManifestRow> {
    let dir = root.join(name);
    pair.degraded.write_dir(&dir.join("degraded"), PHASE_PREFIX)?;
    pair.target.write_dir(&dir.join("target"), PHASE_PREFIX)?;
    pair.average.write_rsv(&dir.join("average.rsv"))?;
    Ok(ManifestRow {
        split,
        name: name.to_string(),
        degraded: format!("{name}/degraded"),
        average: format!("{name}/average.rsv"),
        target: format!("{name}/target"),
    })
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    crate::metrics::write_csv(path, rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>().map_err(csv_err)?;
    if rows.is_empty() {
        return Err(Error::Integrity(format!("{} lists no cases", path.display())));
    }
    Ok(rows)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

pub fn load_case(base: &Path, row: &ManifestRow) -> Result<TrainingPair> {
    let degraded = Volume4D::read_dir(&resolve(base, &row.degraded), PHASE_PREFIX)?;
    let target = Volume4D::read_dir(&resolve(base, &row.target), PHASE_PREFIX)?;
    let average = Volume3D::read_rsv(&resolve(base, &row.average))?;
    if degraded.grid() != target.grid() || average.grid != degraded.grid() || degraded.n_phases() != target.n_phases() {
        return Err(Error::Integrity(format!("case {} has mismatched volumes", row.name)));
    }
    Ok(TrainingPair { degraded, average, target })
}

/// Loads every case of `split` listed in the manifest at `path`.
pub fn load_split(path: &Path, split: Split) -> Result<Vec<(String, TrainingPair)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| Ok((r.name.clone(), load_case(base, r)?)))
        .collect()
}
