//! Experiment configuration, run manifests and the pipelines behind the
//! command-line tool.

mod config;
mod manifest;
mod runs;

pub use config::{AblationAxis, ExperimentConfig, Task, UqMethod, COMPACT_CNN};
pub use manifest::{content_hash, FileEntry, PhaseTime, RunManifest, RunRecorder};
pub use runs::{
    run, run_ablation, run_attack, run_binary, run_gen_data, run_loo, run_maps, run_region,
    run_source_detection, stage_convert, stage_eval, stage_retention, stage_train, summary_csv, MapStat,
    RunOutput, SummaryRow, CONFUSION_HEADER, MAPS_HEADER, PERTURBATION_HEADER, SUMMARY_HEADER,
};
