//! Experiment harness for consilium: plans, the transcript store, the
//! threaded runner, and report rendering. The `consilium` binary is a thin
//! layer over this crate.

pub mod plan;
pub mod report;
pub mod runner;
pub mod store;

pub use plan::{BackendChoice, ExperimentPlan};
pub use report::{build_report_doc, report_from_store, render_text, write_outputs, ReportDoc};
pub use runner::{run_experiment, ExperimentOutcome, RunnerError};
pub use store::{TranscriptRecord, TranscriptStore};
