//! Synthetic data, run configuration, checkpoints, and the drivers used by
//! the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{generate_dataset, load_pair, Manifest, Split};
