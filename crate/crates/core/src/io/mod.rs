//! Datasets, checkpoints, experiment configuration and report files.

mod checkpoint;
mod cifar;
mod config;
mod dataset;
pub mod report;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{apply_whitening, load_cifar10, load_cifar10_dir, CIFAR_RECORD_BYTES};
pub use config::{
    cifar_layers, toy_layers, DataConfig, EvalConfig, ExperimentConfig, ModelConfig, PRESETS,
};
pub use dataset::{gcn_normalize, Dataset, Preprocessing, Split};
pub use synthetic::{synthetic_dataset, SyntheticKind, SyntheticSpec};
