//! Checkpoints on disk, run configuration files and file-backed training
//! sinks.

mod checkpoint;
mod config;
mod sink;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE};
pub use config::{CostSection, DataSection, RunConfig, StageSection, TrainSection, PRESETS};
pub use sink::{FileSink, LOSS_CSV};
