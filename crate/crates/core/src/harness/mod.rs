//! Configuration, stage orchestration with resumable artifacts, and
//! reporting.

mod config;
mod report;
mod stages;

pub use config::{RunConfig, Stage, SEED_ENV};
pub use report::{ec_ratio, emit_report, is_monotone, ReportSummary, ResultRow, ResultsTable};
pub use stages::{
    baseline_csv, baseline_eval, compose_eval, datagen, fewshot_eval, file_sha256, load_expert_pool,
    read_experts_manifest, read_stamp, run_experiment, train_experts, ExpertsManifest, RunOutcome,
    StageStamp, EC_CSV, EXPERTS_DIR, EXPERTS_MANIFEST, EXPERTS_REPORT, FEWSHOT_CSV, PACK_DIR,
    STAMPS_DIR,
};
