//! Batch harness around the field filter: dataset synthesis and ingestion,
//! full-trajectory runs, error metrics, noise-density sweeps, and SVG
//! reports. The `field-ekf` binary is a thin CLI over these modules.

pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pgm;
pub mod plot;
pub mod runner;
pub mod sweep;

pub use config::RunConfig;
pub use dataset::{ingest, simulate, write_dataset, Dataset, SimData};
pub use error::{HarnessError, Result};
pub use metrics::MetricsReport;
pub use runner::{run_filter, EstimateRow, FrameSource, MemoryFrames, RunInput, RunOutcome};
pub use sweep::{run_sweep, SweepEntry};
