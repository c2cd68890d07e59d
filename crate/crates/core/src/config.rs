//! TOML run configuration. Every key is required, unknown keys are rejected, and
//! paths inside the file are relative to the file's directory.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::metrics::{SSIM_RANGE_HU, SSIM_WINDOW};
use crate::net::network::{NetConfig, TileSpec};
use crate::net::train::TrainConfig;
use crate::phantom::Phantom4D;
use crate::recon::ReconOptions;
use crate::respiration::SynthParams;
use crate::rsa::FlowParams;
use crate::scanner::{ScanGeometry, ScanOptions};
use crate::volume::GridSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    /// 0 is the canonical thorax; other values are seeded anatomical variants.
    pub variant: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSection {
    pub duration: f64,
    pub mean_period: f64,
    pub period_jitter: f64,
    pub amplitude_jitter: f64,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// (z, y, x) voxels.
    pub dims: [usize; 3],
    /// (z, y, x) mm.
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub n_phases: usize,
    pub quantize: bool,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsaSection {
    pub flow: FlowParams,
    /// Trajectory seed spacing in voxels.
    pub trajectory_stride: usize,
    /// Axial slice range `[first, last)` used for streak orientation.
    pub streak_slices: [usize; 2],
    /// HU window of the PGM exports.
    pub pgm_window: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub residual: bool,
    /// z slices per inference tile; 0 runs the whole volume in one pass.
    pub tile_chunk: usize,
    pub tile_overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub ssim_window: usize,
    pub ssim_range_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Every random stream in a run derives from this.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomSection,
    pub signal: SignalSection,
    pub geometry: ScanGeometry,
    pub grid: GridSection,
    pub scan: ScanSection,
    pub recon: ReconOptions,
    pub rsa: RsaSection,
    pub network: NetworkSection,
    pub training: TrainConfig,
    pub dataset: DatasetConfig,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let synth = SynthParams::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("out"),
            phantom: PhantomSection { variant: 0 },
            signal: SignalSection {
                duration: synth.duration,
                mean_period: synth.mean_period,
                period_jitter: synth.period_jitter,
                amplitude_jitter: synth.amplitude_jitter,
                sample_rate: synth.sample_rate,
            },
            geometry: ScanGeometry::desk(),
            grid: GridSection { dims: [64, 128, 128], spacing: [2.5; 3] },
            scan: ScanSection { n_phases: 10, quantize: true, noise_sd: 0.0 },
            recon: ReconOptions::default(),
            rsa: RsaSection { flow: FlowParams::default(), trajectory_stride: 8, streak_slices: [16, 48], pgm_window: [-1000.0, 500.0] },
            network: NetworkSection {
                in_channels: net.in_channels,
                channels: net.channels,
                residual: net.residual,
                tile_chunk: 0,
                tile_overlap: 0,
            },
            training: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            evaluation: EvaluationSection { ssim_window: SSIM_WINDOW, ssim_range_hu: SSIM_RANGE_HU },
        }
    }
}

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Signal = 1,
    ScanNoise = 2,
    Dataset = 3,
    NetworkInit = 4,
    Training = 5,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version)));
        }
        cfg.dataset.seed = cfg.stream_seed(Stream::Dataset);
        cfg.training.seed = cfg.stream_seed(Stream::Training);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file and resolves `output_dir` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = path.parent().unwrap_or(Path::new(".")).join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.grid().validate().map_err(cfg_err)?;
        self.geometry.validate().map_err(cfg_err)?;
        self.net_config().validate().map_err(cfg_err)?;
        self.dataset.validate().map_err(cfg_err)?;
        if self.scan.n_phases == 0 {
            return Err(Error::Config("scan.n_phases must be at least 1".into()));
        }
        if self.evaluation.ssim_window % 2 == 0 || self.rsa.flow.window % 2 == 0 {
            return Err(Error::Config("SSIM and flow windows must be odd".into()));
        }
        if self.rsa.streak_slices[0] >= self.rsa.streak_slices[1] {
            return Err(Error::Config("rsa.streak_slices must be an increasing range".into()));
        }
        Ok(())
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng.next_u64()
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::centered(self.grid.dims, self.grid.spacing)
    }

    pub fn phantom(&self) -> Phantom4D {
        Phantom4D::thorax_variant(self.phantom.variant)
    }

    pub fn synth_params(&self) -> SynthParams {
        let s = &self.signal;
        SynthParams {
            duration: s.duration,
            mean_period: s.mean_period,
            period_jitter: s.period_jitter,
            amplitude_jitter: s.amplitude_jitter,
            sample_rate: s.sample_rate,
            seed: self.stream_seed(Stream::Signal),
        }
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            n_phases: self.scan.n_phases,
            quantize: self.scan.quantize,
            noise_sd: self.scan.noise_sd,
            seed: self.stream_seed(Stream::ScanNoise),
            mu_water: self.recon.mu_water,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig { in_channels: self.network.in_channels, channels: self.network.channels.clone(), residual: self.network.residual }
    }

    pub fn tile(&self) -> Option<TileSpec> {
        (self.network.tile_chunk > 0).then_some(TileSpec { chunk: self.network.tile_chunk, overlap: self.network.tile_overlap })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
        assert_eq!(back.grid, cfg.grid);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = RunConfig::default().to_toml();
        let missing = text.replace("mean_period = 4.0\n", "");
        let Err(Error::Config(m)) = RunConfig::from_toml(&missing) else { panic!("missing key accepted") };
        assert!(m.contains("mean_period"), "{m}");
        let unknown = text.replace("[signal]\n", "[signal]\nbogus = 1\n");
        let Err(Error::Config(m)) = RunConfig::from_toml(&unknown) else { panic!("unknown key accepted") };
        assert!(m.contains("bogus"), "{m}");
        let version = text.replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(RunConfig::from_toml(&version), Err(Error::Config(_))));
    }

    #[test]
    fn streams_differ() {
        let cfg = RunConfig::default();
        let seeds = [Stream::Signal, Stream::ScanNoise, Stream::Dataset, Stream::NetworkInit, Stream::Training].map(|s| cfg.stream_seed(s));
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
