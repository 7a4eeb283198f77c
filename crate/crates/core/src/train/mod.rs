//! Three-stage training: ranking pre-training of the backbone and experts,
//! weakly supervised diagnostic head training, and joint fine-tuning on opinion scores.

mod config;
mod engine;
mod loss;
mod plan;

pub use config::{lr_schedule, DecayMode, Interleave, TrainConfig};
pub use engine::{
    evaluate_stage1, evaluate_stage2, evaluate_stage3, run_stage1, run_stage2, run_stage3, EpochRecord, RunOutput,
    StageReport, SEPARABLE_ARTIFACTS,
};
pub use loss::{artifact_loss, artifact_loss_grad, global_loss, global_loss_grad, rank_loss, rank_loss_grad, total_loss};
pub use plan::{Stage, StagePlan};
