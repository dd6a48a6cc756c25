pub mod cli;
pub mod concepts;
pub mod error;
pub mod metrics;
pub mod microbench;
pub mod model;
pub mod numcore;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
