//! Optimization: AdamW, warmup-cosine schedule, early stopping and
//! checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, windows_for, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::lr_schedule;
pub use train::{
    ensemble_output, ensemble_outputs, targets_for, train, train_to_dir, EarlyStopping, EpochRecord, TrainReport,
    CHECKPOINT_FILE, REPORT_FILE,
};
