//! ROC analysis and the known-digit experiment.

pub mod experiment;
pub mod report;
pub mod roc;

pub use experiment::{
    roc_of_records, run_known_digit_experiment, CellResult, ExperimentConfig, ExperimentReport, MatrixRow, Timings,
    TrainingSummary, REPORT_SCHEMA_VERSION,
};
pub use report::{export_report, read_report, render_roc, render_table};
pub use roc::{rank_auc, roc_auc, RocResult};
