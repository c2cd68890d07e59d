//! Two-stage (Tetris) training: stage I on 2D+t slices with the z sub-convolutions
//! skipped and frozen, stage II on random 4D crops of three shapes with everything
//! trainable. Batch size 1.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{forward_full, network_input, network_target, Network, TileSpec};
use super::optim::{adam_step, l1_loss, AdamHyper, OptimState};
use super::tensor::Tensor5D;
use crate::error::{domain, Result};
use crate::metrics::{lung_mask, ssim_roi, SSIM_RANGE_HU, SSIM_WINDOW};
use crate::volume::{Volume3D, Volume4D};

/// One training or validation case: gated reconstruction, its average image, and
/// the ground-truth 4D image.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub degraded: Volume4D,
    pub average: Volume3D,
    pub target: Volume4D,
}

/// Network-ready input and target tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor5D<f32>,
    pub target: Tensor5D<f32>,
}

impl Sample {
    pub fn from_pair(pair: &TrainingPair, residual: bool) -> Result<Self> {
        Ok(Sample {
            input: network_input(&pair.degraded, &pair.average)?,
            target: network_target(&pair.degraded, &pair.target, residual)?,
        })
    }

    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Self> {
        Ok(Sample { input: self.input.crop(start, size)?, target: self.target.crop(start, size)? })
    }
}

/// Every axial slice of every case as a (x, y, t) sample: one per z per case.
pub fn stage1_samples(cases: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for c in cases {
        let [_, _, nz, ny, nx] = c.input.dims;
        for z in 0..nz {
            out.push(c.crop([z, 0, 0], [1, ny, nx])?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub val_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Crops drawn per stage II epoch.
    pub stage2_steps: usize,
    /// Stage II crop extents (z, y, x); t always spans every phase.
    pub block_shapes: Vec<[usize; 3]>,
    pub adam: AdamHyper,
    /// Derived from the run seed, not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 4,
            stage2_epochs: 4,
            stage2_steps: 64,
            block_shapes: vec![[8, 64, 64], [16, 48, 48], [32, 32, 32]],
            adam: AdamHyper::default(),
            seed: 7,
        }
    }
}

/// One optimizer step on one sample; returns the loss before the step.
pub fn train_step(net: &mut Network<f32>, state: &mut OptimState, hyper: &AdamHyper, lr: f64, s: &Sample) -> Result<f64> {
    net.zero_grad();
    let (out, cache) = net.forward_cached(&s.input)?;
    let (loss, g) = l1_loss(&out, &s.target)?;
    net.backward(&g, &cache)?;
    adam_step(net, state, hyper, lr)?;
    Ok(loss)
}

/// Mean loss without updating.
pub fn evaluate_loss(net: &Network<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return domain("no samples to evaluate");
    }
    let mut total = 0.0;
    for s in samples {
        total += l1_loss(&net.forward(&s.input)?, &s.target)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Epochs `start_epoch..epochs` of one stage. Every epoch draws from its own
/// random stream, so a stage resumed from a checkpoint continues exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub epochs: usize,
    pub start_epoch: usize,
    pub seed: u64,
}

impl Schedule {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Schedule { epochs, start_epoch: 0, seed }
    }

    fn rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }
}

/// Stage I. `on_epoch` runs after every epoch (checkpointing, validation, logging)
/// and may fill in `val_ssim`.
pub fn tetris_stage1(
    net: &mut Network<f32>,
    samples: &[Sample],
    schedule: &Schedule,
    state: &mut OptimState,
    hyper: &AdamHyper,
    mut on_epoch: impl FnMut(&mut EpochLog, &Network<f32>, &OptimState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return domain("stage I needs at least one sample");
    }
    if let Some(s) = samples.iter().find(|s| s.input.dims[2] != 1) {
        return domain(format!("stage I samples must have z = 1, got {}", s.input.dims[2]));
    }
    net.set_z_frozen(true);
    let mut logs = Vec::new();
    for epoch in schedule.start_epoch..schedule.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut schedule.rng(epoch));
        let lr = hyper.learning_rate(epoch, schedule.epochs);
        let mut total = 0.0;
        for &i in &order {
            total += train_step(net, state, hyper, lr, &samples[i])?;
        }
        let mut log = EpochLog { epoch, stage: Stage::One, loss: total / samples.len() as f64, val_ssim: None };
        on_epoch(&mut log, net, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Smallest crop extent (z, y, x) the network accepts: x-y reach the coarsest
/// level with at least two samples.
pub fn min_block<T: super::tensor::Real>(net: &Network<T>) -> [usize; 3] {
    let m = 2 * net.config.xy_multiple();
    [1, m, m]
}

/// Uniform crop origin for `size` inside `dims` (z, y, x).
pub fn random_crop(rng: &mut ChaCha8Rng, dims: [usize; 3], size: [usize; 3]) -> Result<[usize; 3]> {
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return domain(format!("crop {size:?} does not fit in {dims:?}"));
    }
    Ok([0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a])))
}

fn check_shapes(net: &Network<f32>, shapes: &[[usize; 3]], dims: [usize; 3]) -> Result<()> {
    if shapes.is_empty() {
        return domain("stage II needs at least one block shape");
    }
    let min = min_block(net);
    let m = net.config.xy_multiple();
    for s in shapes {
        if (0..3).any(|a| s[a] < min[a]) || s[1] % m != 0 || s[2] % m != 0 {
            return domain(format!("block {s:?} is smaller than the network's receptive field minimum {min:?} or not a multiple of {m}"));
        }
        if (0..3).any(|a| s[a] > dims[a]) {
            return domain(format!("block {s:?} exceeds the volume {dims:?}"));
        }
    }
    Ok(())
}

/// Stage II: `steps` random crops per epoch, shape chosen uniformly among `shapes`.
#[allow(clippy::too_many_arguments)]
pub fn tetris_stage2(
    net: &mut Network<f32>,
    cases: &[Sample],
    shapes: &[[usize; 3]],
    steps: usize,
    schedule: &Schedule,
    state: &mut OptimState,
    hyper: &AdamHyper,
    mut on_epoch: impl FnMut(&mut EpochLog, &Network<f32>, &OptimState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if cases.is_empty() || steps == 0 {
        return domain("stage II needs cases and at least one step per epoch");
    }
    let dims = [cases[0].input.dims[2], cases[0].input.dims[3], cases[0].input.dims[4]];
    if cases.iter().any(|c| c.input.dims[2..] != cases[0].input.dims[2..]) {
        return domain("stage II cases must share one grid");
    }
    check_shapes(net, shapes, dims)?;
    net.set_z_frozen(false);
    let mut logs = Vec::new();
    for epoch in schedule.start_epoch..schedule.epochs {
        let mut rng = schedule.rng(epoch);
        let lr = hyper.learning_rate(epoch, schedule.epochs);
        let mut total = 0.0;
        for _ in 0..steps {
            let case = &cases[rng.random_range(0..cases.len())];
            let shape = shapes[rng.random_range(0..shapes.len())];
            let start = random_crop(&mut rng, dims, shape)?;
            total += train_step(net, state, hyper, lr, &case.crop(start, shape)?)?;
        }
        let mut log = EpochLog { epoch, stage: Stage::Two, loss: total / steps as f64, val_ssim: None };
        on_epoch(&mut log, net, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean lung-ROI SSIM of the recovered phases against ground truth. The lung
/// ROI comes from each ground-truth phase.
pub fn lung_ssim(recovered: &Volume4D, truth: &Volume4D) -> Result<f64> {
    if recovered.n_phases() != truth.n_phases() {
        return domain("phase counts differ");
    }
    let scores = recovered
        .phases
        .par_iter()
        .zip(&truth.phases)
        .map(|(r, t)| {
            let (roi, warning) = lung_mask(t);
            if let Some(w) = warning {
                return domain(w);
            }
            ssim_roi(r, t, &roi, SSIM_WINDOW, SSIM_RANGE_HU)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Validation lung SSIM of a network over cases.
pub fn validation_ssim(net: &Network<f32>, cases: &[TrainingPair], tile: Option<TileSpec>) -> Result<f64> {
    if cases.is_empty() {
        return domain("no validation cases");
    }
    let mut total = 0.0;
    for c in cases {
        total += lung_ssim(&forward_full(net, &c.degraded, &c.average, tile)?, &c.target)?;
    }
    Ok(total / cases.len() as f64)
}
