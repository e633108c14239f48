//! File formats, experiment harness and timing benchmark for few-shot
//! batch-norm statistic adaptation. The numerics live in `lccs-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod harness;

pub use lccs_core as core;
