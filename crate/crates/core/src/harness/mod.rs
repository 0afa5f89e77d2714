//! Training and evaluation orchestration, presets, metric files and the
//! finite-difference suite.

mod config;
pub mod gradsuite;
mod records;
mod train;

pub use config::{DatasetKind, TrainConfig, PRESET_NAMES};
pub use records::{
    dump_gate_trace, export_metrics_csv, read_metrics_csv, EpochMetrics, GateTraceRecord, TraceMode, METRICS_HEADER,
};
pub use train::{evaluate, load_datasets, run_config, run_training, EvalReport, RunOutput, TrainStats, Trainer};
