#![allow(dead_code)]

use std::sync::Arc;

use arig_core::engine::{lagged_inputs, FrameRecord, SessionInit};
use arig_core::rng::Rng;
use arig_core::{EngineConfig, InitMode, Model, MotionVector};

pub fn model(cfg: &EngineConfig, seed: u64) -> Arc<Model> {
    Model::init(cfg, seed, InitMode::Random).unwrap().shared()
}

pub fn random_vec(r: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.uniform(-1.0, 1.0) as f32).collect()
}

pub fn init(cfg: &EngineConfig, seed: u64) -> SessionInit {
    let mut r = Rng::seeded(seed ^ 0x5eed);
    SessionInit {
        reference_motion: MotionVector::new(random_vec(&mut r, cfg.motion_dim), cfg.motion_dim)
            .unwrap(),
        first_audio: random_vec(&mut r, cfg.audio_dim),
        seed,
    }
}

/// Random features with alternating speech bursts on both sides.
pub fn records(cfg: &EngineConfig, frames: usize, seed: u64) -> Vec<FrameRecord> {
    let mut r = Rng::seeded(seed);
    (0..frames)
        .map(|t| FrameRecord {
            agent_audio: random_vec(&mut r, cfg.audio_dim),
            agent_energy: if (t / 11) % 2 == 0 { 0.4 } else { 0.01 },
            user_audio: random_vec(&mut r, cfg.audio_dim),
            user_motion: random_vec(&mut r, cfg.motion_dim),
            user_energy: if (t / 17) % 2 == 1 { 0.3 } else { 0.02 },
        })
        .collect()
}

pub fn stream(
    cfg: &EngineConfig,
    frames: usize,
    seed: u64,
) -> (SessionInit, Vec<arig_core::FrameInput>) {
    let init = init(cfg, seed);
    let inputs = lagged_inputs(&records(cfg, frames, seed), &init);
    (init, inputs)
}
