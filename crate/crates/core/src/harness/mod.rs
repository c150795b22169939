//! Run configuration, checkpoints, training loops and benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod train;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, RngState};
pub use config::{FinetuneInit, GridSampling, Mode, RunConfig};
pub use bench::{BenchReport, BenchRow, FeaturePath, Timing};
