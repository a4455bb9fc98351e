//! Library side of the `qtrain` command: run manifests, the toy training
//! loop, and the report builders behind each subcommand.

pub mod commands;
pub mod manifest;
pub mod train;

pub use manifest::{load_profile, RunManifest};
pub use train::{metrics_csv, run, MetricsRow, TrainOutcome, Trainer, CSV_HEADER};
