//! Configuration, experiment sweeps, checkpoints, result files and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod output;
pub mod sweep;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, ExperimentSection};
pub use output::{aggregate, emit_csv, emit_plot_series, read_csv, CSV_HEADER};
pub use sweep::{run_sweep, ResultRow, SweepReport};
