//! Two-stage adversarial training, checkpoints and the training log.

mod bundle;
mod config;
mod schedule;

pub use bundle::{
    load_checkpoint, load_checkpoint_for, param_digest, save_checkpoint, ModelBundle, ParamDigests, Position,
    CHECKPOINT_MANIFEST, CHECKPOINT_VERSION,
};
pub use config::{Profile, StepCounts, TrainConfig, Variant};
pub use schedule::{
    continue_training, log_path, read_log, run_variant, train_stage_one, train_stage_two, AppliedRates, StepObserver,
    StepRecord, TrainHooks, LOG_FILE,
};
