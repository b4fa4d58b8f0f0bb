//! The two-stage adversarial training schedule.

mod config;
mod data;
mod trainer;

pub use config::{config_diff, CheckpointConfig, DataConfig, StageSchedule, TrainConfig};
pub use data::{derive_seed, Batch, TrainingData};
pub use trainer::{
    evaluate_samples, train, train_on, Progress, SetMetrics, TrainOptions, TrainOutcome, TrainState, Trainer,
    ValidationRecord, CHECKPOINT_DIR, FINAL_MODEL, LOG_FILE,
};
