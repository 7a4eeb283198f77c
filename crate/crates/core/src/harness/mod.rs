//! Command layer: run configuration, ablation variants, corpus synthesis, staged
//! training with checkpoint prerequisites, evaluation tables and the ablation runner.

mod config;
mod eval;
mod run;
mod variant;

pub use config::{RunConfig, PROXY_SCORES_ENV};
pub use eval::{correlation_row, detection_rows, evaluate, CorrelationRow, DetectionRow, EvalReport};
pub use run::{
    ablate, latest_checkpoint, load_corpus, mean_std, proxy_oracle, run_pipeline, run_stage, summarize, synth, train,
    AblationCell, AblationTable, PipelineRun,
};
pub use variant::{matched_bottleneck, Variant};
