//! IO, file formats, benchmarking, the session gateway and the `arig` CLI
//! on top of `arig-core`.

pub use arig_core as core;

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod gateway;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
