//! Frame-wise autoregressive inference engine for dyadic interactive
//! head-motion generation.
//!
//! The crate is `no_std` with `alloc`. Everything that touches the file
//! system, the network or a wall clock lives in the companion `arig` crate;
//! timing is injected through [`engine::Clock`].
//!
//! Per frame the engine runs three stages:
//!
//! * [`ibu`]: fuses audio and motion of both parties into behavior tokens,
//!   summarizes the current chunk and decodes the long-range context into a
//!   contextual interaction summary (the cis-token).
//! * [`csu`]: voice activity for both tracks plus a 7-way conversation
//!   state predicted by cross-attention.
//! * [`pmp`] and [`diffusion`]: coarse-to-fine conditioning, temporal
//!   smoothing and a continuous DDPM sampler for the next motion vector.
#![no_std]

extern crate alloc;

pub mod caches;
pub mod config;
pub mod csu;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod ibu;
pub mod motion;
pub mod pmp;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;

pub use config::EngineConfig;
pub use engine::{FrameInput, FrameOutput, Session};
pub use error::{Error, Result};
pub use motion::MotionVector;
pub use real::Real;
pub use tensor::Tensor;
pub use weights::{InitMode, Model, Weights};
