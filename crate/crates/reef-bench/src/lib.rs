//! Benchmark harness over the emulator stack: instruction characterization,
//! end-to-end application accuracy runs, and machine-readable reports.

pub mod characterize;
pub mod report;
pub mod run;

pub use characterize::{characterize, Characterization};
pub use report::{to_csv, to_json, write_report};
pub use run::{run_app, App, RunReport, RunSpec};
