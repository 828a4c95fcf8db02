pub mod cli;
pub mod config;
pub mod decoder;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
