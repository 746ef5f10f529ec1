//! Staged joint training: three steps per iteration, each with its own optimizer, loss and set
//! of trainable parameter groups.

mod augment;
mod optim;
mod schedule;
mod steps;
mod trainer;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use optim::Adam;
pub use schedule::{StageSchedule, Step};
pub use steps::{
    distill_target, mono_objective, step1_update, step2_update, step3_update, stereo_objective, update, Batch,
    Objective, StepReport, StereoTeacher,
};
pub use trainer::{checkpoint_mono_branch, checkpoint_rig, AdamConfig, EpochSummary, LossLog, TrainConfig, Trainer, SEED_ENV};
