//! Adam training loops for pretraining and both tuning variants, plus the
//! checkpoint file format.

mod adam;
mod checkpoint;
mod config;
mod run;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{AdamConfig, Phase, TrainConfig};
pub use run::{
    checkpoint_file_name, direction_weights, pretrain, pretrain_start, run, tune_start, unions_tune,
    vanilla_tune, Collect, LogRecord, RunDir, TrainHooks, LOG_FILE,
};
