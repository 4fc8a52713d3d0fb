//! Pretext pretraining, adapter finetuning, volume prediction and sweeps.

mod config;
mod dataset;
mod predict;
mod sweep;
mod train;

pub use config::{DataConfig, PretextStage, TrainConfig};
pub use dataset::{volume_name, Dataset, SampleRef, MANIFEST};
pub use predict::{evaluate_volume, flip_consistency, pearson, predict_volume};
pub use sweep::{
    ablation_sweep, convergence_comparison, pretrain_then_finetune, write_sweep_csv, Axis, ConvergenceRow, SweepRow,
    M_VALUES,
};
pub use train::{
    denoise_batch, evaluate_split, finetune, predict_batch, pretext_pretrain, pretext_stage, probe_loss, probe_refs,
    segmentation_batch, train_full, train_loop, Objective, RunReport, PROBE_SIZE,
};
