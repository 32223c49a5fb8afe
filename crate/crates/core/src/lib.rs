pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod fusion_net;
pub mod nn_blocks;
pub mod phantom;
pub mod stages;
pub mod topology;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
