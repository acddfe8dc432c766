pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data_pipeline;
pub mod error;
pub mod evaluation;
pub mod generators;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod training;
pub mod warping_ops;

pub use error::{Error, Result};
