//! End-to-end experiment runs: toy data, configuration, the staged pipeline,
//! limited-data sweeps and reporting.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod toy;

pub use config::ExperimentConfig;
pub use pipeline::{load_eval_reports, run_pipeline, Pipeline, RunRecord, RunSummary, Stage, StageStatus};
pub use report::{emit_report, ReportBundle, ResultRow, ResultTable};
pub use sweep::{run_limited_data_sweep, SweepOutcome};
pub use toy::{make_toy_dataset, ToySpec};
