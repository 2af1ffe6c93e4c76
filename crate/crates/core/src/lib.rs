pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod tuning;

pub use error::{Error, Result};
