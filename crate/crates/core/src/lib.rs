pub mod config;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod pretrain;
pub mod probe;
pub mod quantize;
pub mod synth;

pub use error::{CoreError, Result};
