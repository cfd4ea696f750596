pub mod cli;
pub mod commembed;
pub mod config;
pub mod error;
pub mod finetune;
pub mod fixtures;
pub mod hetgraph;
pub mod hgt;
pub mod ingest;
pub mod metrics;
pub mod numerics;
pub mod pretrain;
pub mod textenc;

pub use error::{GastonError, Result};
