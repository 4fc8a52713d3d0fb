pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
