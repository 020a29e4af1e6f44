//! Data, training and persistence around `vgt-core`: synthetic video QA
//! generation, JSONL datasets, configuration files, training/evaluation
//! loops and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
