pub mod asr;
pub mod backend;
pub mod config;
pub mod container;
pub mod ctdnn;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod frontend;
pub mod fsutil;
pub mod ivector;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
