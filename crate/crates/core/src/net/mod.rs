//! Separable 4D convolution network with manual backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Iso4DConvBlock, Param, SepConv4DBlock};
pub use network::{count_params_flops, forward_full, NetConfig, Network, TileSpec};
pub use optim::{adam_step, l1_loss, AdamHyper, OptimState};
pub use tensor::{Real, Tensor5D};
pub use train::{tetris_stage1, tetris_stage2, EpochLog, Sample, TrainConfig, TrainingPair};
