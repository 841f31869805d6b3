use alloc::format;

use crate::error::{Error, Result};

/// Energy-threshold voice activity detection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    /// Number of recent frames whose mean energy is compared to the threshold.
    pub window: usize,
    pub threshold: f32,
    /// Frames a track stays active after its energy falls below threshold.
    pub hangover: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            window: 3,
            threshold: 0.1,
            hangover: 5,
        }
    }
}

/// Every structural constant of the engine.
///
/// Defaults are the full-size configuration: chunk window 6, context
/// capacity 512, 6 attention heads, 512-wide embeddings with a 2048-wide
/// feed-forward, 768-dim audio features, 262-dim motion coefficients,
/// 25 fps and 15 denoising steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Frames per chunk (`c`).
    pub chunk: usize,
    /// Context cache capacity in chunk summaries (`w`).
    pub context: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub bidir_depth: usize,
    pub integ_depth: usize,
    pub context_depth: usize,
    pub audio_dim: usize,
    pub motion_dim: usize,
    /// Width of the latent `z` handed to the diffusion head.
    pub latent_dim: usize,
    pub fps: u32,
    pub audio_window: usize,
    pub temporal_window: usize,
    pub diffmlp_blocks: usize,
    pub diffmlp_width: usize,
    pub diffmlp_cond: usize,
    pub time_embed_dim: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    pub vad: VadConfig,
    pub seed: u64,
    /// Offset and length of the keypoint-coordinate slice of a motion vector
    /// (values expected in `[0, 1]`).
    pub keypoint_offset: usize,
    pub keypoint_len: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            chunk: 6,
            context: 512,
            heads: 6,
            head_dim: 64,
            d_model: 512,
            d_ff: 2048,
            bidir_depth: 2,
            integ_depth: 1,
            context_depth: 2,
            audio_dim: 768,
            motion_dim: 262,
            latent_dim: 262,
            fps: 25,
            audio_window: 3,
            temporal_window: 5,
            diffmlp_blocks: 3,
            diffmlp_width: 262,
            diffmlp_cond: 512,
            time_embed_dim: 256,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 15,
            vad: VadConfig::default(),
            seed: 0,
            keypoint_offset: 0,
            keypoint_len: 63,
        }
    }
}

impl EngineConfig {
    /// A reduced-width configuration with the same topology, for tests and
    /// demos where full-size matrices would dominate runtime.
    pub fn small() -> Self {
        EngineConfig {
            chunk: 3,
            context: 16,
            heads: 2,
            head_dim: 8,
            d_model: 16,
            d_ff: 32,
            audio_dim: 12,
            motion_dim: 10,
            latent_dim: 10,
            diffmlp_width: 10,
            diffmlp_cond: 16,
            time_embed_dim: 8,
            keypoint_len: 4,
            ..EngineConfig::default()
        }
    }

    /// Milliseconds of wall time covered by one frame.
    pub fn frame_budget_ms(&self) -> f64 {
        1000.0 / self.fps as f64
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chunk", self.chunk),
            ("context", self.context),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("bidir_depth", self.bidir_depth),
            ("integ_depth", self.integ_depth),
            ("context_depth", self.context_depth),
            ("audio_dim", self.audio_dim),
            ("motion_dim", self.motion_dim),
            ("latent_dim", self.latent_dim),
            ("fps", self.fps as usize),
            ("audio_window", self.audio_window),
            ("temporal_window", self.temporal_window),
            ("diffmlp_blocks", self.diffmlp_blocks),
            ("diffmlp_width", self.diffmlp_width),
            ("diffmlp_cond", self.diffmlp_cond),
            ("time_embed_dim", self.time_embed_dim),
            ("train_steps", self.train_steps),
            ("inference_steps", self.inference_steps),
            ("vad_window", self.vad.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.audio_window < 2 {
            return Err(Error::config(
                "audio_window must cover at least the previous frame",
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even"));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(
                "d_model must be even for sinusoidal positions",
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range ({}, {}) must satisfy 0 < start <= end < 1",
                self.beta_start, self.beta_end
            )));
        }
        if self.inference_steps > self.train_steps {
            return Err(Error::config(format!(
                "inference_steps {} exceeds train_steps {}",
                self.inference_steps, self.train_steps
            )));
        }
        if !(self.vad.threshold > 0.0) {
            return Err(Error::config("vad threshold must be positive"));
        }
        if self.keypoint_offset + self.keypoint_len > self.motion_dim {
            return Err(Error::config(format!(
                "keypoint slice {}..{} exceeds motion_dim {}",
                self.keypoint_offset,
                self.keypoint_offset + self.keypoint_len,
                self.motion_dim
            )));
        }
        Ok(())
    }
}
